"""GAN over state-action pairs; its discriminator scores dataset membership.

The generator and discriminator are trained jointly on concatenated,
normalized (s, a) rows of a fixed dataset. Only the discriminator is consumed
downstream: its sigmoid output is the confidence that a pair lies inside the
dataset's support, and a quantile of the dataset's own confidences becomes
the gating threshold. The generator exists to keep the discriminator honest
and is never queried after training.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import json
import os

import numpy as np

from . import numerics as nn
from .dataset import FixedDataset
from .ioutil import atomic_write_json

# generator output covers [-3, 3] per normalized dimension, beyond the
# +-3 sigma band where the (normalized) data lives
GEN_OUTPUT_SCALE = 3.0
NORM_STD_FLOOR = 1e-6


class GanTrainingError(RuntimeError):
    """Non-finite loss during adversarial training."""


@dataclass(frozen=True)
class GanConfig:
    latent_dim: int = 8
    gen_hidden: tuple[int, ...] = (64, 64)
    dis_hidden: tuple[int, ...] = (64, 64)
    lr: float = 1e-3
    batch: int = 128
    steps: int = 5000
    label_smoothing: float = 0.1

    def __post_init__(self):
        if self.latent_dim < 1 or self.batch < 1 or self.steps < 0 or self.lr <= 0:
            raise ValueError(f"invalid GanConfig {self}")
        if not (0.0 <= self.label_smoothing < 0.5):
            raise ValueError("label_smoothing must lie in [0, 0.5)")


@dataclass
class SupportModel:
    """Trained discriminator plus the normalization that feeds it."""

    state_dim: int
    action_dim: int
    dis_spec: nn.MlpSpec
    dis_params: nn.MlpParams
    gen_spec: nn.MlpSpec
    gen_params: nn.MlpParams
    norm_mean: np.ndarray
    norm_std: np.ndarray
    training_curve: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))


def _normalize(m: SupportModel, x: np.ndarray) -> np.ndarray:
    return (x - m.norm_mean) / m.norm_std


def _gen_samples(m: SupportModel, z: np.ndarray) -> np.ndarray:
    return GEN_OUTPUT_SCALE * nn.mlp_forward(m.gen_spec, m.gen_params, z)


def disc_loss_and_grads(dis_spec, dis_params, x, targets):
    """Mean binary cross-entropy of the discriminator on labeled inputs and
    its exact parameter gradient, computed at the logits for stability."""
    logits = nn.mlp_forward_preact(dis_spec, dis_params, x)
    loss = float(np.mean(nn.softplus(logits) - targets * logits))
    delta = nn.sigmoid(logits) - targets
    _, grads = nn.mlp_backward_from_logits(dis_spec, dis_params, x, delta)
    return loss, grads


def gen_loss_and_grads(gen_spec, gen_params, dis_spec, dis_params, z):
    """Non-saturating generator loss -mean log D(G(z)) and its exact
    generator-parameter gradient through the frozen discriminator."""
    gen_out, gen_trace = nn.mlp_forward_with_trace(gen_spec, gen_params, z)
    fake = GEN_OUTPUT_SCALE * gen_out
    logits = nn.mlp_forward_preact(dis_spec, dis_params, fake)
    loss = float(np.mean(nn.softplus(-logits)))
    delta = nn.sigmoid(logits) - 1.0
    dfake, _ = nn.mlp_backward_from_logits(dis_spec, dis_params, fake, delta)
    _, grads = nn.mlp_backward(gen_spec, gen_params, z, GEN_OUTPUT_SCALE * dfake, trace=gen_trace)
    return loss, grads


def train_gan(d: FixedDataset, cfg: GanConfig, seed: int) -> SupportModel:
    """Adversarial training on the dataset's (s, a) pairs.

    Non-saturating generator loss; discriminator targets are
    ``1 - label_smoothing`` for real rows and 0 for negatives. One
    discriminator step per generator step. Deterministic for a fixed seed.

    Half of each negative batch pairs a dataset state with an action drawn
    uniformly over the action box. Generator samples alone leave the
    discriminator unconstrained off-support once the generator has matched
    these small datasets, and its off-support scores then drift arbitrarily;
    the uniform negatives pin them down and sharpen the per-state action
    boundary that the projection gate depends on. Generator training is
    untouched.
    """
    from .envs import get_env

    if d.size < cfg.batch:
        raise ValueError(f"dataset size {d.size} < batch {cfg.batch}")
    x_raw = d.pairs()
    mean = x_raw.mean(axis=0)
    std = np.maximum(x_raw.std(axis=0), NORM_STD_FLOOR)
    x = (x_raw - mean) / std
    dim = x.shape[1]
    ds_dim = d.meta.state_dim
    env_spec = get_env(d.meta.env_id).spec
    a_lo = (env_spec.box_low - mean[ds_dim:]) / std[ds_dim:]
    a_hi = (env_spec.box_high - mean[ds_dim:]) / std[ds_dim:]
    n_uniform = cfg.batch // 2

    rng = np.random.default_rng(seed)
    # relu discriminator: queries never leave the action box, inside which the
    # uniform negatives constrain it; relu halves the forward cost vs tanh
    dis_spec = nn.MlpSpec((dim, *cfg.dis_hidden, 1), "relu", "sigmoid")
    gen_spec = nn.MlpSpec((cfg.latent_dim, *cfg.gen_hidden, dim), "tanh", "tanh")
    dis_params = nn.init_params(dis_spec, rng)
    gen_params = nn.init_params(gen_spec, rng)
    hyper = nn.AdamHyper(lr=cfg.lr, beta1=0.5)
    dis_opt = nn.init_adam(dis_spec, hyper)
    gen_opt = nn.init_adam(gen_spec, hyper)

    real_target = 1.0 - cfg.label_smoothing
    curve = np.zeros((cfg.steps, 2))
    model = SupportModel(
        d.meta.state_dim, d.meta.action_dim, dis_spec, dis_params, gen_spec, gen_params, mean, std
    )
    for t in range(cfg.steps):
        real = x[rng.integers(0, d.size, size=cfg.batch)]
        z = rng.normal(size=(cfg.batch, cfg.latent_dim))
        fake = GEN_OUTPUT_SCALE * nn.mlp_forward(gen_spec, gen_params, z)
        neg_s = x[rng.integers(0, d.size, size=n_uniform), :ds_dim]
        neg_a = rng.uniform(a_lo, a_hi, size=(n_uniform, dim - ds_dim))
        negatives = np.concatenate(
            [fake[: cfg.batch - n_uniform], np.concatenate([neg_s, neg_a], axis=1)], axis=0
        )

        # discriminator step on the combined real/negative batch
        xd = np.concatenate([real, negatives], axis=0)
        targets = np.full((2 * cfg.batch, 1), 0.0)
        targets[: cfg.batch] = real_target
        d_loss, d_grads = disc_loss_and_grads(dis_spec, dis_params, xd, targets)
        dis_params, dis_opt = nn.adam_step(dis_params, d_grads, dis_opt)

        # non-saturating generator step against the updated discriminator
        z2 = rng.normal(size=(cfg.batch, cfg.latent_dim))
        g_loss, g_grads = gen_loss_and_grads(gen_spec, gen_params, dis_spec, dis_params, z2)
        gen_params, gen_opt = nn.adam_step(gen_params, g_grads, gen_opt)

        if not (np.isfinite(d_loss) and np.isfinite(g_loss)):
            raise GanTrainingError(f"non-finite loss at step {t}: d={d_loss}, g={g_loss}")
        curve[t, 0] = d_loss
        curve[t, 1] = g_loss

    model.dis_params = dis_params
    model.gen_params = gen_params
    model.training_curve = curve
    return model


def confidence(m: SupportModel, s: np.ndarray, a: np.ndarray):
    """Discriminator confidence in [0, 1] for one (s, a) pair or a batch."""
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if s.shape[-1] != m.state_dim or a.shape[-1] != m.action_dim:
        raise ValueError(
            f"dims ({s.shape[-1]}, {a.shape[-1]}) do not match model "
            f"({m.state_dim}, {m.action_dim})"
        )
    single = s.ndim == 1
    x = np.concatenate([np.atleast_2d(s), np.atleast_2d(a)], axis=1)
    out = nn.mlp_forward(m.dis_spec, m.dis_params, _normalize(m, x))[:, 0]
    return float(out[0]) if single else out


def calibrate_threshold(m: SupportModel, d: FixedDataset, quantile: float) -> float:
    """Empirical confidence quantile over all dataset pairs."""
    if not (0.0 <= quantile <= 1.0):
        raise ValueError("quantile must lie in [0, 1]")
    if d.size < 1:
        raise ValueError("empty dataset")
    conf = confidence(m, d.s, d.a)
    return float(np.quantile(conf, quantile))


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def support_auc(m: SupportModel, in_s, in_a, out_s, out_a) -> float:
    """Rank AUC of confidence separating in-support from out-of-support pairs.

    Equals the probability that a random in-pair scores above a random
    out-pair, counting ties as one half.
    """
    in_scores = np.atleast_1d(confidence(m, in_s, in_a))
    out_scores = np.atleast_1d(confidence(m, out_s, out_a))
    n_in, n_out = len(in_scores), len(out_scores)
    if n_in == 0 or n_out == 0:
        raise ValueError("both pair sets must be non-empty")
    ranks = _average_ranks(np.concatenate([in_scores, out_scores]))
    rank_sum = ranks[:n_in].sum()
    return float((rank_sum - n_in * (n_in + 1) / 2.0) / (n_in * n_out))


def save_support_model(out_dir, m: SupportModel, cfg: GanConfig, seed: int) -> None:
    """Write dis/gen checkpoints plus a JSON sidecar to a directory."""
    os.makedirs(out_dir, exist_ok=True)
    nn.save_params(os.path.join(out_dir, "dis.lrnn"), m.dis_params)
    nn.save_params(os.path.join(out_dir, "gen.lrnn"), m.gen_params)
    final = m.training_curve[-1] if len(m.training_curve) else (float("nan"), float("nan"))
    sidecar = {
        "state_dim": m.state_dim,
        "action_dim": m.action_dim,
        "dis_spec": {
            "layer_sizes": list(m.dis_spec.layer_sizes),
            "hidden_activation": m.dis_spec.hidden_activation,
            "output_activation": m.dis_spec.output_activation,
        },
        "gen_spec": {
            "layer_sizes": list(m.gen_spec.layer_sizes),
            "hidden_activation": m.gen_spec.hidden_activation,
            "output_activation": m.gen_spec.output_activation,
        },
        "norm_mean": m.norm_mean.tolist(),
        "norm_std": m.norm_std.tolist(),
        "config": {
            "latent_dim": cfg.latent_dim,
            "gen_hidden": list(cfg.gen_hidden),
            "dis_hidden": list(cfg.dis_hidden),
            "lr": cfg.lr,
            "batch": cfg.batch,
            "steps": cfg.steps,
            "label_smoothing": cfg.label_smoothing,
        },
        "seed": seed,
        "final_dis_loss": float(final[0]),
        "final_gen_loss": float(final[1]),
    }
    atomic_write_json(os.path.join(out_dir, "model.json"), sidecar)


def load_support_model(out_dir) -> SupportModel:
    with open(os.path.join(out_dir, "model.json")) as f:
        side = json.load(f)
    dis_spec = nn.MlpSpec(tuple(side["dis_spec"]["layer_sizes"]),
                          side["dis_spec"]["hidden_activation"],
                          side["dis_spec"]["output_activation"])
    gen_spec = nn.MlpSpec(tuple(side["gen_spec"]["layer_sizes"]),
                          side["gen_spec"]["hidden_activation"],
                          side["gen_spec"]["output_activation"])
    return SupportModel(
        state_dim=side["state_dim"],
        action_dim=side["action_dim"],
        dis_spec=dis_spec,
        dis_params=nn.load_params(os.path.join(out_dir, "dis.lrnn"), dis_spec),
        gen_spec=gen_spec,
        gen_params=nn.load_params(os.path.join(out_dir, "gen.lrnn"), gen_spec),
        norm_mean=np.asarray(side["norm_mean"], dtype=np.float64),
        norm_std=np.asarray(side["norm_std"], dtype=np.float64),
    )
