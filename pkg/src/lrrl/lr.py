"""Support-gated backups: noise-overlay projection and the full training loops.

A proposed next-action enters the Bellman backup only if the support
discriminator's confidence clears a threshold; otherwise zero-mean Gaussian
noise is added (cumulatively, a random walk clipped to the action box) until
it does or an iteration cap fires. The gated trainer and the naive baseline
share one loop body and differ only in the next-action selector, so the gate
is provably the only behavioral difference between them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import ddpg as dd
from . import numerics as nn
from .dataset import Batch, FixedDataset, sample_indices
from .envs import get_env
from .ioutil import atomic_write_text
from .support_gan import SupportModel, calibrate_threshold, confidence

FALLBACKS = ("best_seen", "dataset_nearest")
DATASET_NEAREST_CANDIDATES = 32


@dataclass(frozen=True)
class LrConfig:
    """Gate directives. ``p`` is a confidence quantile of the training data by
    default; set ``p_is_quantile=False`` to pass an absolute threshold.
    ``sigma=None`` resolves to 0.1 x the action-box half-width per dimension."""

    p: float = 0.1
    p_is_quantile: bool = True
    sigma: float | None = None
    # cap is termination insurance only; the projection loop itself is
    # uncapped, and 100 measurably truncates ~10% of rare-region walks
    k_max: int = 300
    fallback: str = "best_seen"
    project_actor_actions: bool = False

    def __post_init__(self):
        if not (0.0 <= self.p <= 1.0):
            raise ValueError("p must lie in [0, 1]")
        if self.sigma is not None and self.sigma <= 0.0:
            raise ValueError("sigma must be positive")
        if self.k_max < 1:
            raise ValueError("k_max must be >= 1")
        if self.fallback not in FALLBACKS:
            raise ValueError(f"fallback must be one of {FALLBACKS}")


@dataclass(frozen=True)
class LrGate:
    """A resolved gate: frozen threshold, per-dimension noise scale, action box."""

    model: SupportModel
    p: float
    sigma: np.ndarray
    k_max: int
    fallback: str
    action_low: np.ndarray
    action_high: np.ndarray
    fallback_data: FixedDataset | None = None


@dataclass(frozen=True)
class ProjectionOutcome:
    action: np.ndarray
    iterations_used: int
    final_confidence: float
    fallback_used: bool


class TrainingError(RuntimeError):
    pass


def resolve_gate(model: SupportModel, cfg: LrConfig, d: FixedDataset) -> LrGate:
    """Freeze the threshold (calibrating a quantile directive against the
    dataset) and the noise scale before training starts."""
    p = calibrate_threshold(model, d, cfg.p) if cfg.p_is_quantile else cfg.p
    env = get_env(d.meta.env_id)
    half = 0.5 * (env.spec.box_high - env.spec.box_low)
    sigma = np.full(env.spec.action_dim, cfg.sigma) if cfg.sigma is not None else 0.1 * half
    return LrGate(
        model=model,
        p=float(p),
        sigma=sigma,
        k_max=cfg.k_max,
        fallback=cfg.fallback,
        action_low=env.spec.box_low,
        action_high=env.spec.box_high,
        fallback_data=d if cfg.fallback == "dataset_nearest" else None,
    )


def lr_project(
    gate: LrGate, s_next: np.ndarray, a_proposed: np.ndarray, rng: np.random.Generator
) -> ProjectionOutcome:
    """Walk one proposed action into the support region.

    Already-confident proposals return unchanged with zero iterations. The
    walk adds fresh zero-mean Gaussian noise to the current candidate and
    clips to the action box each iteration; on hitting the cap, the fallback
    guarantees a result (the best candidate seen, or the most confident of 32
    sampled dataset actions).
    """
    a = np.asarray(a_proposed, dtype=np.float64)
    conf = confidence(gate.model, s_next, a)
    if conf >= gate.p:
        return ProjectionOutcome(a.copy(), 0, conf, False)
    best_a, best_c = a.copy(), conf
    cur = a.copy()
    for k in range(1, gate.k_max + 1):
        cur = np.clip(cur + rng.normal(0.0, gate.sigma), gate.action_low, gate.action_high)
        conf = confidence(gate.model, s_next, cur)
        if conf > best_c:
            best_a, best_c = cur.copy(), conf
        if conf >= gate.p:
            return ProjectionOutcome(cur, k, conf, False)
    if gate.fallback == "best_seen":
        return ProjectionOutcome(best_a, gate.k_max, best_c, True)
    return _dataset_nearest(gate, s_next, rng)


def _dataset_nearest(gate: LrGate, s_next: np.ndarray, rng: np.random.Generator) -> ProjectionOutcome:
    """Most confident action among sampled dataset records; ties go to the
    record whose state is nearest the query state."""
    d = gate.fallback_data
    if d is None:
        raise TrainingError("dataset_nearest fallback requires a dataset")
    idx = rng.integers(0, d.size, size=min(DATASET_NEAREST_CANDIDATES, d.size))
    cand_s, cand_a = d.s[idx], d.a[idx]
    confs = confidence(gate.model, np.broadcast_to(s_next, cand_s.shape), cand_a)
    dists = np.linalg.norm(cand_s - s_next, axis=1)
    order = np.lexsort((dists, -confs))
    best = order[0]
    return ProjectionOutcome(cand_a[best].copy(), gate.k_max, float(confs[best]), True)


_U64 = (1 << 64) - 1

try:  # compiled inner kernels; the numpy fallbacks are semantically identical
    import numba as _numba

    @_numba.njit(cache=True)
    def _walk_block(cur, noise, lo, hi, out):  # pragma: no cover - thin kernel
        m, nb, dim = noise.shape
        for i in range(m):
            for j in range(nb):
                for k in range(dim):
                    v = cur[i, k] + noise[i, j, k]
                    if v < lo[k]:
                        v = lo[k]
                    elif v > hi[k]:
                        v = hi[k]
                    out[i, j, k] = v
                    cur[i, k] = v

    @_numba.njit(cache=True)
    def _assemble_block_input(s_norm, pos, a_mean, a_std, x):  # pragma: no cover
        m, nb, dim = pos.shape
        ds_dim = s_norm.shape[1]
        for i in range(m):
            for j in range(nb):
                row = i * nb + j
                for k in range(ds_dim):
                    x[row, k] = s_norm[i, k]
                for k in range(dim):
                    x[row, ds_dim + k] = (pos[i, j, k] - a_mean[k]) / a_std[k]

    @_numba.njit(cache=True)
    def _scan_block(confs, p, first, bmax, barg):  # pragma: no cover
        m, nb = confs.shape
        for i in range(m):
            hit = -1
            mx = confs[i, 0]
            mi = 0
            for j in range(nb):
                c = confs[i, j]
                if c > mx:
                    mx = c
                    mi = j
                if hit < 0 and c >= p:
                    hit = j
            first[i] = hit
            bmax[i] = mx
            barg[i] = mi

except ImportError:  # pragma: no cover
    def _walk_block(cur, noise, lo, hi, out):
        m, nb, dim = noise.shape
        c = cur.copy()
        for j in range(nb):
            np.add(c, noise[:, j], out=c)
            np.maximum(c, lo, out=c)
            np.minimum(c, hi, out=c)
            out[:, j] = c
        cur[:] = c

    def _assemble_block_input(s_norm, pos, a_mean, a_std, x):
        m, nb, dim = pos.shape
        ds_dim = s_norm.shape[1]
        x[:, :ds_dim].reshape(m, nb, ds_dim)[:] = s_norm[:, None, :]
        xa = x[:, ds_dim:]
        xa.reshape(m, nb, dim)[:] = pos
        xa -= a_mean
        xa /= a_std

    def _scan_block(confs, p, first, bmax, barg):
        ok = confs >= p
        crossed = ok.any(axis=1)
        first[:] = np.where(crossed, ok.argmax(axis=1), -1)
        bmax[:] = confs.max(axis=1)
        barg[:] = confs.argmax(axis=1)


def _stream_state(seed: int, step: int, record: int, salt: int) -> tuple[np.ndarray, np.ndarray]:
    key = np.array([seed & _U64, ((salt & 0x3) << 62) | (step & ((1 << 62) - 1))], dtype=np.uint64)
    counter = np.array([0, 0, record & _U64, 0], dtype=np.uint64)
    return key, counter


def _record_rng(seed: int, step: int, record: int, salt: int = 0) -> np.random.Generator:
    """Counter-based stream for one projected record. Records own disjoint
    Philox counter blocks, so projection results are independent of the order
    records are processed in (and of whether they are batched)."""
    key, counter = _stream_state(seed, step, record, salt)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


_PROJECT_BLOCK = 32


def project_batch(gate: LrGate, s_next: np.ndarray, a_proposed: np.ndarray, seed: int, step: int, salt: int = 0):
    """Vectorized projection of a minibatch of proposed next-actions.

    Record ``i`` uses an rng stream derived from (seed, step, i), so the
    result matches :func:`lr_project` called record by record (bulk noise
    draws consume the generator streams identically). Walk positions are
    evaluated in blocks so the discriminator runs on large batches; only the
    positions up to each record's first threshold crossing are ever read.
    Returns (actions, stats) with stats = (projection_rate, fallback_rate,
    mean_iterations).
    """
    n = len(a_proposed)
    conf0 = np.atleast_1d(confidence(gate.model, s_next, a_proposed))
    out = a_proposed.copy()
    need = np.flatnonzero(conf0 < gate.p)
    if len(need) == 0:
        return out, (0.0, 0.0, 0.0)
    dim = a_proposed.shape[1]
    m = len(need)
    # one bit generator re-seated per record via state assignment: the same
    # streams _record_rng defines, without per-record construction cost.
    # standard_normal then scaling matches lr_project's normal(0, sigma)
    # draws exactly while staying on numpy's scalar fast path.
    bg = np.random.Philox(key=np.zeros(2, dtype=np.uint64))
    gen = np.random.Generator(bg)
    state = bg.state
    key, counter = _stream_state(seed, step, 0, salt)
    state["state"]["key"] = key
    ctr = counter.copy()
    state["state"]["counter"] = ctr

    def reseat(rec: int):
        ctr[2] = rec
        bg.state = state

    # most walks finish early: draw a prefix of each record's stream now and
    # redraw in full for the few survivors (prefix values recur identically)
    stage = min(3 * _PROJECT_BLOCK, gate.k_max)
    noise = np.empty((m, gate.k_max, dim))
    for row, rec in enumerate(need):
        reseat(int(rec))
        noise[row, :stage] = gen.standard_normal((stage, dim))
    noise[:, :stage] *= gate.sigma
    drawn = stage
    s_sub = s_next[need]
    result = a_proposed[need].copy()
    cur = a_proposed[need].copy()
    best_a, best_c = cur.copy(), conf0[need].copy()
    iters = np.full(m, gate.k_max, dtype=np.int64)
    mdl = gate.model
    ds_dim = mdl.state_dim
    s_norm = (s_sub - mdl.norm_mean[:ds_dim]) / mdl.norm_std[:ds_dim]
    a_mean, a_std = mdl.norm_mean[ds_dim:], mdl.norm_std[ds_dim:]
    live = np.arange(m)
    k_done = 0
    while k_done < gate.k_max and len(live):
        # wider blocks once only stragglers remain, to cap per-block overhead
        blk = min(3 * _PROJECT_BLOCK if len(live) <= 16 else _PROJECT_BLOCK, gate.k_max - k_done)
        if k_done + blk > drawn:
            for row in live:
                reseat(int(need[row]))
                noise[row] = gen.standard_normal((gate.k_max, dim))
                noise[row] *= gate.sigma
            drawn = gate.k_max
        n_live = len(live)
        cur_live = np.ascontiguousarray(cur[live])
        noise_live = np.ascontiguousarray(noise[live, k_done : k_done + blk])
        pos = np.empty((n_live, blk, dim))
        _walk_block(cur_live, noise_live, gate.action_low, gate.action_high, pos)
        cur[live] = cur_live
        # same normalize-then-forward arithmetic as confidence(), with the
        # state columns normalized once outside the loop and the input
        # assembled in place
        x = np.empty((n_live * blk, ds_dim + dim))
        _assemble_block_input(s_norm[live], pos, a_mean, a_std, x)
        confs = nn.mlp_forward(mdl.dis_spec, mdl.dis_params, x)[:, 0].reshape(n_live, blk)
        first = np.empty(n_live, dtype=np.int64)
        bmax = np.empty(n_live)
        barg = np.empty(n_live, dtype=np.int64)
        _scan_block(confs, gate.p, first, bmax, barg)
        # best-seen only matters for records that never cross
        upd = bmax > best_c[live]
        rows = np.flatnonzero(upd)
        best_c[live[rows]] = bmax[rows]
        best_a[live[rows]] = pos[rows, barg[rows]]
        crossed = first >= 0
        rows = np.flatnonzero(crossed)
        hit = live[rows]
        result[hit] = pos[rows, first[rows]]
        iters[hit] = k_done + first[rows] + 1
        live = live[~crossed]
        k_done += blk
    if gate.fallback == "best_seen":
        result[live] = best_a[live]
    else:
        # lr_project's rng sits k_max draws into the stream when it falls back
        for i in live:
            reseat(int(need[i]))
            gen.standard_normal((gate.k_max, dim))
            result[i] = _dataset_nearest(gate, s_sub[i], gen).action
    out[need] = result
    return out, (m / n, len(live) / n, float(iters.mean()))


class LrSelector:
    """Next-action selector that projects proposals through the gate."""

    def __init__(self, gate: LrGate, seed: int):
        self.gate = gate
        self.seed = seed
        self._step = 0
        self.last_stats = (0.0, 0.0, 0.0)

    def for_step(self, step: int):
        self._step = step
        return self

    def __call__(self, s_next: np.ndarray, a_proposed: np.ndarray) -> np.ndarray:
        actions, stats = project_batch(self.gate, s_next, a_proposed, self.seed, self._step)
        self.last_stats = stats
        return actions


class IdentitySelector:
    """Pass-through selector: plain (naive) offline DDPG."""

    last_stats = (0.0, 0.0, 0.0)

    def for_step(self, step: int):
        return self

    def __call__(self, s_next: np.ndarray, a_proposed: np.ndarray) -> np.ndarray:
        return a_proposed


@dataclass(frozen=True)
class MetricRow:
    step: int
    critic_loss: float
    mean_target_y: float
    mean_abs_q: float
    max_abs_q: float
    projection_rate: float
    fallback_rate: float
    eval_return_mean: float | None = None
    eval_return_std: float | None = None


CSV_HEADER = (
    "step,critic_loss,mean_target_y,mean_abs_q,max_abs_q,"
    "projection_rate,fallback_rate,eval_return_mean,eval_return_std"
)


@dataclass
class TrainMetrics:
    rows: list[MetricRow]

    def to_csv(self, path) -> None:
        lines = [CSV_HEADER]
        for r in self.rows:
            cells = [
                str(r.step),
                repr(r.critic_loss),
                repr(r.mean_target_y),
                repr(r.mean_abs_q),
                repr(r.max_abs_q),
                repr(r.projection_rate),
                repr(r.fallback_rate),
                "" if r.eval_return_mean is None else repr(r.eval_return_mean),
                "" if r.eval_return_std is None else repr(r.eval_return_std),
            ]
            lines.append(",".join(cells))
        atomic_write_text(path, "\n".join(lines) + "\n")

    def summary(self) -> dict:
        if not self.rows:
            return {"steps": 0}
        return {
            "steps": self.rows[-1].step,
            "final_critic_loss": self.rows[-1].critic_loss,
            "final_mean_abs_q": self.rows[-1].mean_abs_q,
            "max_abs_q_over_run": max(r.max_abs_q for r in self.rows),
            "mean_projection_rate": float(np.mean([r.projection_rate for r in self.rows])),
            "mean_fallback_rate": float(np.mean([r.fallback_rate for r in self.rows])),
        }


def _dataset_q_stats(agent: dd.DdpgAgent, d: FixedDataset) -> tuple[float, float]:
    q = nn.mlp_forward(agent.q_spec, agent.q_params, d.pairs())[:, 0]
    absq = np.abs(q)
    return float(absq.mean()), float(absq.max())


def _run_ddpg_loop(
    d: FixedDataset,
    dcfg: dd.DdpgConfig,
    selector,
    seed: int,
    *,
    metrics_interval: int = 250,
    eval_hook=None,
    actor_transform=None,
) -> tuple[dd.DdpgAgent, TrainMetrics]:
    """One loop for both the gated trainer and the naive baseline.

    Training never touches the environment; the optional eval_hook is the
    single, clearly separated exception. Episode ends in these environments
    are time-limit truncations, not true terminals, so backups bootstrap
    through them (the stored done flag only marks episode boundaries).
    """
    env = get_env(d.meta.env_id)
    rng = np.random.default_rng(seed)
    agent = dd.init_agent(
        d.meta.state_dim, d.meta.action_dim, env.spec.box_low, env.spec.box_high, dcfg, rng
    )
    q_opt = nn.init_adam(agent.q_spec, nn.AdamHyper(dcfg.lr_critic))
    pi_opt = nn.init_adam(agent.pi_spec, nn.AdamHyper(dcfg.lr_actor))
    mask_done = not getattr(env, "time_limit_only", False)
    rows: list[MetricRow] = []
    acc = {"loss": 0.0, "y": 0.0, "proj": 0.0, "fb": 0.0, "n": 0}
    for t in range(dcfg.total_steps):
        try:
            idx = sample_indices(d, dcfg.batch_n, rng)
            raw = d.batch(idx)
            done = raw.done if mask_done else np.zeros(len(raw), dtype=bool)
            batch = Batch(raw.s, raw.a, raw.r, raw.s_next, done)
            sel = selector.for_step(t)
            y = dd.critic_target(agent, batch, dcfg.gamma, sel)
            agent, q_opt, loss = dd.critic_update(agent, batch, y, q_opt)
            agent, pi_opt = dd.actor_update(agent, batch, pi_opt, action_transform=actor_transform and (lambda s, a: actor_transform(s, a, t)))
            agent = dd.soft_update(agent, dcfg.tau)
        except Exception as e:
            raise TrainingError(f"training step {t} failed: {e}") from e
        proj_rate, fb_rate, _ = selector.last_stats
        acc["loss"] += loss
        acc["y"] += float(y.mean())
        acc["proj"] += proj_rate
        acc["fb"] += fb_rate
        acc["n"] += 1
        if (t + 1) % metrics_interval == 0 or t + 1 == dcfg.total_steps:
            mean_q, max_q = _dataset_q_stats(agent, d)
            ev = eval_hook(agent) if eval_hook is not None else (None, None)
            n = acc["n"]
            rows.append(
                MetricRow(
                    step=t + 1,
                    critic_loss=acc["loss"] / n,
                    mean_target_y=acc["y"] / n,
                    mean_abs_q=mean_q,
                    max_abs_q=max_q,
                    projection_rate=acc["proj"] / n,
                    fallback_rate=acc["fb"] / n,
                    eval_return_mean=ev[0],
                    eval_return_std=ev[1],
                )
            )
            acc = {"loss": 0.0, "y": 0.0, "proj": 0.0, "fb": 0.0, "n": 0}
    return agent, TrainMetrics(rows)


def train_lr_ddpg(
    d: FixedDataset,
    model: SupportModel,
    dcfg: dd.DdpgConfig,
    lcfg: LrConfig,
    seed: int,
    *,
    metrics_interval: int = 250,
    eval_hook=None,
) -> tuple[dd.DdpgAgent, TrainMetrics, LrGate]:
    """Gated offline training: minibatch, propose a' = pi'(s'), project each
    a' through the gate, back up, regress the critic, ascend the actor, track
    targets. Returns the resolved gate alongside the agent and metrics."""
    gate = resolve_gate(model, lcfg, d)
    selector = LrSelector(gate, seed)
    transform = None
    if lcfg.project_actor_actions:
        def transform(s, a, step):
            out, _ = project_batch(gate, s, a, seed, step, salt=1)
            return out
    agent, metrics = _run_ddpg_loop(
        d, dcfg, selector, seed,
        metrics_interval=metrics_interval, eval_hook=eval_hook, actor_transform=transform,
    )
    return agent, metrics, gate


def train_baseline(
    d: FixedDataset,
    algo: str,
    dcfg: dd.DdpgConfig,
    seed: int,
    *,
    metrics_interval: int = 250,
    eval_hook=None,
) -> tuple[dd.DdpgAgent, TrainMetrics]:
    """Baselines sharing the gated trainer's machinery.

    ``naive_ddpg`` is the identical loop with a pass-through selector;
    ``behavior_clone`` regresses the actor onto dataset actions and leaves
    the critic at initialization.
    """
    if algo == "naive_ddpg":
        return _run_ddpg_loop(
            d, dcfg, IdentitySelector(), seed,
            metrics_interval=metrics_interval, eval_hook=eval_hook,
        )
    if algo == "behavior_clone":
        return _train_behavior_clone(
            d, dcfg, seed, metrics_interval=metrics_interval, eval_hook=eval_hook
        )
    raise ValueError(f"unknown baseline {algo!r}")


def _train_behavior_clone(d, dcfg, seed, *, metrics_interval, eval_hook):
    env = get_env(d.meta.env_id)
    rng = np.random.default_rng(seed)
    agent = dd.init_agent(
        d.meta.state_dim, d.meta.action_dim, env.spec.box_low, env.spec.box_high, dcfg, rng
    )
    pi_opt = nn.init_adam(agent.pi_spec, nn.AdamHyper(dcfg.lr_actor))
    rows: list[MetricRow] = []
    acc_loss, acc_n = 0.0, 0
    for t in range(dcfg.total_steps):
        idx = sample_indices(d, dcfg.batch_n, rng)
        batch = d.batch(idx)
        tanh_out = nn.mlp_forward(agent.pi_spec, agent.pi_params, batch.s)
        pred = agent.box_center + agent.box_half * tanh_out
        resid = pred - batch.a
        loss = float(np.mean(resid**2))
        upstream = (2.0 / d.meta.action_dim) * resid * agent.box_half
        _, grads = nn.mlp_backward(agent.pi_spec, agent.pi_params, batch.s, upstream)
        new_pi, pi_opt = nn.adam_step(agent.pi_params, grads, pi_opt)
        agent = dd.replace_params(agent, pi_params=new_pi)
        acc_loss += loss
        acc_n += 1
        if (t + 1) % metrics_interval == 0 or t + 1 == dcfg.total_steps:
            ev = eval_hook(agent) if eval_hook is not None else (None, None)
            rows.append(
                MetricRow(
                    step=t + 1,
                    critic_loss=acc_loss / acc_n,
                    mean_target_y=float("nan"),
                    mean_abs_q=float("nan"),
                    max_abs_q=float("nan"),
                    projection_rate=0.0,
                    fallback_rate=0.0,
                    eval_return_mean=ev[0],
                    eval_return_std=ev[1],
                )
            )
            acc_loss, acc_n = 0.0, 0
    return agent, TrainMetrics(rows)
