"""Minimal MLP stack: exact analytic gradients, Adam, binary checkpoints.

Everything is float64 and purely functional: forward/backward/adam_step never
mutate their arguments, so repeated calls are bitwise identical. Inputs may be
single vectors ``(d,)`` or batches ``(n, d)``. For batches, parameter
gradients are the *mean* over the batch while input gradients stay
per-sample (the chain-rule shape downstream modules need).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

HIDDEN_ACTIVATIONS = ("tanh", "relu")
OUTPUT_ACTIVATIONS = ("identity", "tanh", "sigmoid")

CHECKPOINT_MAGIC = b"LRNN"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Dimension mismatch between a spec, its parameters, or an input."""


class CheckpointError(ValueError):
    """Malformed parameter checkpoint file."""


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of a feed-forward net: sizes plus activation choices."""

    layer_sizes: tuple[int, ...]
    hidden_activation: str = "tanh"
    output_activation: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        if len(self.layer_sizes) < 2:
            raise ShapeError(f"need at least input and output sizes, got {self.layer_sizes}")
        if any(s < 1 for s in self.layer_sizes):
            raise ShapeError(f"layer sizes must be >= 1, got {self.layer_sizes}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1


class MlpParams:
    """Per-layer weight matrices (fan_out, fan_in) and bias vectors (fan_out,).

    Layer arrays are views into one contiguous vector (``flat``) so that
    whole-parameter-set operations (Adam, soft updates, finiteness checks)
    run as single vector ops. Constructing from loose arrays packs them.
    """

    __slots__ = ("weights", "biases", "flat")

    def __init__(self, weights, biases, flat=None):
        if flat is None:
            flat = np.concatenate([a.ravel() for a in weights] + [a.ravel() for a in biases])
            weights, biases = _views_from_flat(flat, [w.shape for w in weights])
        self.weights = weights
        self.biases = biases
        self.flat = flat

    def copy(self) -> "MlpParams":
        return _params_from_flat(self.flat.copy(), [w.shape for w in self.weights])

    def all_finite(self) -> bool:
        # max/min reductions are exact (nan propagates, inf survives) and
        # much cheaper than an elementwise isfinite scan
        return bool(np.isfinite(self.flat.max()) and np.isfinite(self.flat.min()))

    def allclose(self, other: "MlpParams", rtol=0.0, atol=0.0) -> bool:
        return np.allclose(self.flat, other.flat, rtol=rtol, atol=atol)

    def __eq__(self, other):
        return (
            isinstance(other, MlpParams)
            and [w.shape for w in self.weights] == [w.shape for w in other.weights]
            and np.array_equal(self.flat, other.flat)
        )


def _views_from_flat(flat: np.ndarray, weight_shapes) -> tuple[list, list]:
    weights, biases = [], []
    off = 0
    for r, c in weight_shapes:
        weights.append(flat[off : off + r * c].reshape(r, c))
        off += r * c
    for r, _ in weight_shapes:
        biases.append(flat[off : off + r])
        off += r
    return weights, biases


def _params_from_flat(flat: np.ndarray, weight_shapes) -> MlpParams:
    w, b = _views_from_flat(flat, weight_shapes)
    return MlpParams(w, b, flat)


def _alloc_params(spec: MlpSpec) -> MlpParams:
    shapes = [(spec.layer_sizes[i + 1], spec.layer_sizes[i]) for i in range(spec.n_layers)]
    total = sum(r * c + r for r, c in shapes)
    return _params_from_flat(np.empty(total), shapes)


def check_params(spec: MlpSpec, params: MlpParams) -> None:
    if len(params.weights) != spec.n_layers or len(params.biases) != spec.n_layers:
        raise ShapeError(
            f"expected {spec.n_layers} layers, got {len(params.weights)} weight /"
            f" {len(params.biases)} bias arrays"
        )
    for i in range(spec.n_layers):
        want = (spec.layer_sizes[i + 1], spec.layer_sizes[i])
        if params.weights[i].shape != want:
            raise ShapeError(f"layer {i}: weight shape {params.weights[i].shape}, expected {want}")
        if params.biases[i].shape != (want[0],):
            raise ShapeError(f"layer {i}: bias shape {params.biases[i].shape}, expected {(want[0],)}")


def init_params(spec: MlpSpec, rng: np.random.Generator) -> MlpParams:
    """Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)] for weights and biases."""
    params = _alloc_params(spec)
    for i in range(spec.n_layers):
        bound = 1.0 / np.sqrt(spec.layer_sizes[i])
        params.weights[i][:] = rng.uniform(
            -bound, bound, size=(spec.layer_sizes[i + 1], spec.layer_sizes[i])
        )
        params.biases[i][:] = rng.uniform(-bound, bound, size=spec.layer_sizes[i + 1])
    return params


def zeros_like_params(spec: MlpSpec) -> MlpParams:
    params = _alloc_params(spec)
    params.flat.fill(0.0)
    return params


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "identity":
        return z
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        # in place: relu gradients only need the activation's sign
        return np.maximum(z, 0.0, out=z)
    if name == "sigmoid":
        # stable on both tails: 1/(1+e^-z) for z >= 0, e^z/(1+e^z) otherwise
        e = np.exp(-np.abs(z))
        return np.where(z >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))
    raise ValueError(f"unknown activation {name!r}")


def _activation_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    """d activation / d preactivation, from preact z and activation a."""
    if name == "identity":
        return np.ones_like(z)
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        return (a > 0.0).astype(np.float64)
    if name == "sigmoid":
        return a * (1.0 - a)
    raise ValueError(f"unknown activation {name!r}")


def _check_input(spec: MlpSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != spec.in_dim:
        raise ShapeError(f"layer 0: input dim {x.shape[-1]}, expected {spec.in_dim}")
    if x.ndim not in (1, 2):
        raise ShapeError(f"input must be a vector or a batch, got ndim={x.ndim}")
    return x


def _forward_trace(spec: MlpSpec, params: MlpParams, x: np.ndarray):
    """Forward pass keeping preactivations and activations of every layer."""
    preacts, acts = [], [x]
    h = x
    for i in range(spec.n_layers):
        z = h @ params.weights[i].T
        z += params.biases[i]
        name = spec.output_activation if i == spec.n_layers - 1 else spec.hidden_activation
        h = _activate(name, z)
        preacts.append(z)
        acts.append(h)
    return preacts, acts


def mlp_forward(spec: MlpSpec, params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Evaluate the network on a vector (d_in,) or a batch (n, d_in)."""
    x = _check_input(spec, x)
    check_params(spec, params)
    _, acts = _forward_trace(spec, params, x)
    return acts[-1]


def mlp_forward_preact(spec: MlpSpec, params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Output-layer preactivation (the logits, for a sigmoid-output net)."""
    x = _check_input(spec, x)
    check_params(spec, params)
    preacts, _ = _forward_trace(spec, params, x)
    return preacts[-1]


def mlp_forward_with_trace(spec: MlpSpec, params: MlpParams, x: np.ndarray):
    """Forward pass returning (output, trace); pass the trace to
    :func:`mlp_backward` to skip recomputing the forward activations."""
    x = _check_input(spec, x)
    check_params(spec, params)
    trace = _forward_trace(spec, params, x)
    return trace[1][-1], trace


def sigmoid(z: np.ndarray) -> np.ndarray:
    return _activate("sigmoid", np.asarray(z, dtype=np.float64))


def _backward_from_deltas(spec, params, preacts, acts, delta, scale):
    """Common backward chain given the output-layer delta (dL/dz_last per sample)."""
    n_layers = spec.n_layers
    grads = _alloc_params(spec)
    for i in range(n_layers - 1, -1, -1):
        a_prev = acts[i]
        gw, gb = grads.weights[i], grads.biases[i]
        if delta.ndim == 1:
            np.multiply(delta[:, None], a_prev[None, :], out=gw)
            gb[:] = delta
        else:
            np.matmul(delta.T, a_prev, out=gw)
            delta.sum(axis=0, out=gb)
        if scale != 1.0:
            gw *= scale
            gb *= scale
        upstream = delta @ params.weights[i]
        if i > 0:
            act_name = spec.hidden_activation
            delta = upstream * _activation_grad(act_name, preacts[i - 1], acts[i])
        else:
            delta = upstream
    return delta, grads


def mlp_backward(
    spec: MlpSpec, params: MlpParams, x: np.ndarray, upstream: np.ndarray, trace=None
) -> tuple[np.ndarray, MlpParams]:
    """Exact gradients of ``upstream . output`` w.r.t. input and parameters.

    For a batch, parameter gradients are of ``mean_i upstream_i . output_i``
    (batch mean), while the returned input gradient keeps one row per sample,
    each the gradient of its own ``upstream_i . output_i``. ``trace`` may be
    the second result of :func:`mlp_forward_with_trace` for the same
    (spec, params, x).
    """
    x = _check_input(spec, x)
    check_params(spec, params)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != x.shape[:-1] + (spec.out_dim,):
        raise ShapeError(
            f"upstream shape {upstream.shape}, expected {x.shape[:-1] + (spec.out_dim,)}"
        )
    preacts, acts = trace if trace is not None else _forward_trace(spec, params, x)
    delta = upstream * _activation_grad(spec.output_activation, preacts[-1], acts[-1])
    scale = 1.0 if x.ndim == 1 else 1.0 / x.shape[0]
    return _backward_from_deltas(spec, params, preacts, acts, delta, scale)


def mlp_backward_from_logits(
    spec: MlpSpec, params: MlpParams, x: np.ndarray, delta_out: np.ndarray
) -> tuple[np.ndarray, MlpParams]:
    """Backward with the upstream given at the *output preactivation* (logits).

    Used by losses that fold the output nonlinearity into the loss derivative
    (e.g. sigmoid + cross-entropy, where dL/dlogit = p - target is stable while
    dL/dp is not). Batch semantics match :func:`mlp_backward`.
    """
    x = _check_input(spec, x)
    check_params(spec, params)
    delta_out = np.asarray(delta_out, dtype=np.float64)
    if delta_out.shape != x.shape[:-1] + (spec.out_dim,):
        raise ShapeError(
            f"delta shape {delta_out.shape}, expected {x.shape[:-1] + (spec.out_dim,)}"
        )
    preacts, acts = _forward_trace(spec, params, x)
    scale = 1.0 if x.ndim == 1 else 1.0 / x.shape[0]
    return _backward_from_deltas(spec, params, preacts, acts, delta_out, scale)


@dataclass(frozen=True)
class AdamHyper:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not (self.lr >= 0.0 and 0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0 and self.eps > 0.0):
            raise ValueError(f"invalid Adam hyperparameters {self}")


@dataclass
class AdamState:
    first_moment: MlpParams
    second_moment: MlpParams
    step_count: int
    hyper: AdamHyper


def init_adam(spec: MlpSpec, hyper: AdamHyper) -> AdamState:
    return AdamState(zeros_like_params(spec), zeros_like_params(spec), 0, hyper)


def adam_step(
    params: MlpParams, grads: MlpParams, state: AdamState
) -> tuple[MlpParams, AdamState]:
    """One bias-corrected Adam update. Rejects non-finite gradients untouched."""
    if not grads.all_finite():
        raise ValueError("non-finite gradient passed to adam_step; no update applied")
    h = state.hyper
    t = state.step_count + 1
    c1 = 1.0 - h.beta1**t
    c2 = 1.0 - h.beta2**t
    shapes = [w.shape for w in params.weights]
    p, g = params.flat, grads.flat
    m2 = h.beta1 * state.first_moment.flat + (1.0 - h.beta1) * g
    v2 = h.beta2 * state.second_moment.flat + (1.0 - h.beta2) * g * g
    step = h.lr * (m2 / c1) / (np.sqrt(v2 / c2) + h.eps)
    new_params = _params_from_flat(p - step, shapes)
    if not new_params.all_finite():
        raise ValueError(f"adam_step produced non-finite parameters at step {t}")
    new_state = AdamState(_params_from_flat(m2, shapes), _params_from_flat(v2, shapes), t, h)
    return new_params, new_state


def mix_params(target: MlpParams, online: MlpParams, w: float) -> MlpParams:
    """Elementwise convex combination w * target + (1 - w) * online."""
    flat = w * target.flat + (1.0 - w) * online.flat
    return _params_from_flat(flat, [a.shape for a in target.weights])


def negate_params(p: MlpParams) -> MlpParams:
    return _params_from_flat(-p.flat, [a.shape for a in p.weights])


def softplus(z: np.ndarray) -> np.ndarray:
    """log(1 + exp(z)), stable on both tails."""
    z = np.asarray(z, dtype=np.float64)
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def save_params(path, params: MlpParams) -> None:
    """Write the little-endian LRNN checkpoint: header, then weights, then biases."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(params.weights))]
    for w in params.weights:
        chunks.append(struct.pack("<II", w.shape[0], w.shape[1]))
    for w in params.weights:
        chunks.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
    for b in params.biases:
        chunks.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    from .ioutil import atomic_write_bytes

    atomic_write_bytes(path, b"".join(chunks))


def load_params(path, spec: MlpSpec | None = None) -> MlpParams:
    """Read an LRNN checkpoint; validates shapes against ``spec`` when given."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    try:
        version, n_layers = struct.unpack_from("<II", blob, 4)
    except struct.error as e:
        raise CheckpointError(f"{path}: truncated header") from e
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 12
    shapes = []
    for _ in range(n_layers):
        try:
            rows, cols = struct.unpack_from("<II", blob, off)
        except struct.error as e:
            raise CheckpointError(f"{path}: truncated shape table") from e
        shapes.append((rows, cols))
        off += 8
    need = off + sum(r * c * 8 + r * 8 for r, c in shapes)
    if len(blob) < need:
        raise CheckpointError(f"{path}: truncated payload ({len(blob)} < {need} bytes)")
    weights, biases = [], []
    for rows, cols in shapes:
        w = np.frombuffer(blob, dtype="<f8", count=rows * cols, offset=off).reshape(rows, cols)
        weights.append(w.astype(np.float64))
        off += rows * cols * 8
    for rows, _ in shapes:
        b = np.frombuffer(blob, dtype="<f8", count=rows, offset=off)
        biases.append(b.astype(np.float64))
        off += rows * 8
    params = MlpParams(weights, biases)
    if spec is not None:
        check_params(spec, params)
    return params
