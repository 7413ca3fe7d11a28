"""Deterministic actor-critic building blocks shared by all trainers.

The critic regresses Bellman targets computed from the *target* networks; a
pluggable selector decides which next-action actually enters the backup
(identity for the naive baseline, support projection for the gated variant).
The actor ascends the critic's value of its own actions with the critic
frozen. Targets track the online networks through a convex soft update where
``tau`` close to 1 means slow tracking.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass

import numpy as np

from . import numerics as nn
from .dataset import Batch
from .ioutil import atomic_write_json


@dataclass(frozen=True)
class DdpgConfig:
    gamma: float = 0.99
    tau: float = 0.995
    lr_actor: float = 1e-4
    lr_critic: float = 1e-3
    batch_n: int = 128
    total_steps: int = 20000
    actor_hidden: tuple[int, ...] = (64, 64)
    critic_hidden: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.tau <= 1.0):
            raise ValueError("gamma and tau must lie in [0, 1]")
        if self.batch_n < 1 or self.total_steps < 0:
            raise ValueError(f"invalid DdpgConfig {self}")


@dataclass
class DdpgAgent:
    """Online and target critic/actor networks plus the action box."""

    state_dim: int
    action_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    q_spec: nn.MlpSpec
    q_params: nn.MlpParams
    pi_spec: nn.MlpSpec
    pi_params: nn.MlpParams
    q_target_params: nn.MlpParams
    pi_target_params: nn.MlpParams

    @property
    def box_center(self) -> np.ndarray:
        return 0.5 * (self.action_low + self.action_high)

    @property
    def box_half(self) -> np.ndarray:
        return 0.5 * (self.action_high - self.action_low)


def init_agent(
    state_dim: int,
    action_dim: int,
    action_low,
    action_high,
    cfg: DdpgConfig,
    rng: np.random.Generator,
) -> DdpgAgent:
    """Fresh networks (critic first, then actor); targets start as exact copies."""
    q_spec = nn.MlpSpec((state_dim + action_dim, *cfg.critic_hidden, 1), "relu", "identity")
    pi_spec = nn.MlpSpec((state_dim, *cfg.actor_hidden, action_dim), "relu", "tanh")
    q_params = nn.init_params(q_spec, rng)
    pi_params = nn.init_params(pi_spec, rng)
    return DdpgAgent(
        state_dim=state_dim,
        action_dim=action_dim,
        action_low=np.asarray(action_low, dtype=np.float64),
        action_high=np.asarray(action_high, dtype=np.float64),
        q_spec=q_spec,
        q_params=q_params,
        pi_spec=pi_spec,
        pi_params=pi_params,
        q_target_params=q_params.copy(),
        pi_target_params=pi_params.copy(),
    )


def policy_action(agent: DdpgAgent, s: np.ndarray, use_target: bool = False) -> np.ndarray:
    """Deterministic actor output, scaled from tanh range into the action box."""
    params = agent.pi_target_params if use_target else agent.pi_params
    out = nn.mlp_forward(agent.pi_spec, params, s)
    return agent.box_center + agent.box_half * out


def critic_value(agent: DdpgAgent, s: np.ndarray, a: np.ndarray, use_target: bool = False) -> np.ndarray:
    params = agent.q_target_params if use_target else agent.q_params
    x = np.concatenate([np.atleast_2d(s), np.atleast_2d(a)], axis=1)
    q = nn.mlp_forward(agent.q_spec, params, x)[:, 0]
    return q if np.asarray(s).ndim == 2 else float(q[0])


def critic_target(agent: DdpgAgent, batch: Batch, gamma: float, next_action_selector) -> np.ndarray:
    """Backup targets y = r + gamma * (1 - done) * Q'(s', a') with
    a' = selector(s', pi'(s')). Only target networks are evaluated."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    a_proposed = policy_action(agent, batch.s_next, use_target=True)
    a_next = next_action_selector(batch.s_next, a_proposed)
    q_next = critic_value(agent, batch.s_next, a_next, use_target=True)
    not_done = 1.0 - batch.done.astype(np.float64)
    return batch.r + gamma * not_done * q_next


def identity_selector(s_next: np.ndarray, a_proposed: np.ndarray) -> np.ndarray:
    return a_proposed


def critic_loss_and_grads(agent: DdpgAgent, batch: Batch, y: np.ndarray):
    """Mean squared Bellman error over the batch and its exact gradient
    with respect to the online critic parameters."""
    if len(y) != len(batch):
        raise ValueError(f"{len(y)} targets for {len(batch)} records")
    x = np.concatenate([batch.s, batch.a], axis=1)
    q, trace = nn.mlp_forward_with_trace(agent.q_spec, agent.q_params, x)
    resid = q - y[:, None]
    loss = float(np.mean(resid**2))
    _, grads = nn.mlp_backward(agent.q_spec, agent.q_params, x, 2.0 * resid, trace=trace)
    return loss, grads


def critic_update(agent: DdpgAgent, batch: Batch, y: np.ndarray, opt: nn.AdamState):
    """One Adam step on the mean squared Bellman error; returns pre-step loss."""
    loss, grads = critic_loss_and_grads(agent, batch, y)
    if not np.isfinite(loss):
        raise ValueError(f"non-finite critic loss {loss}")
    new_q, new_opt = nn.adam_step(agent.q_params, grads, opt)
    return replace_params(agent, q_params=new_q), new_opt, loss


def actor_objective_grad(agent: DdpgAgent, batch: Batch, action_transform=None):
    """Value and exact actor-parameter gradient of mean_i Q(s_i, pi(s_i))
    with the critic held frozen.

    ``action_transform``, when given, maps the actor's actions before the
    critic evaluates them; its gradient is treated as identity
    (straight-through), so the actor still receives dQ/da at the transformed
    point.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    tanh_out, pi_trace = nn.mlp_forward_with_trace(agent.pi_spec, agent.pi_params, batch.s)
    actions = agent.box_center + agent.box_half * tanh_out
    if action_transform is not None:
        actions = action_transform(batch.s, actions)
    x = np.concatenate([batch.s, actions], axis=1)
    ones = np.ones((len(batch), 1))
    q, q_trace = nn.mlp_forward_with_trace(agent.q_spec, agent.q_params, x)
    dx, _ = nn.mlp_backward(agent.q_spec, agent.q_params, x, ones, trace=q_trace)
    dq_da = dx[:, agent.state_dim :]
    upstream = dq_da * agent.box_half
    _, grads = nn.mlp_backward(agent.pi_spec, agent.pi_params, batch.s, upstream, trace=pi_trace)
    return float(q.mean()), grads


def actor_update(agent: DdpgAgent, batch: Batch, opt: nn.AdamState, action_transform=None):
    """Ascend mean_i Q(s_i, pi(s_i)) through the frozen online critic."""
    value, grads = actor_objective_grad(agent, batch, action_transform)
    if not grads.all_finite():
        raise ValueError(f"non-finite actor gradient at objective value {value}")
    new_pi, new_opt = nn.adam_step(agent.pi_params, nn.negate_params(grads), opt)
    return replace_params(agent, pi_params=new_pi), new_opt


def soft_update(agent: DdpgAgent, tau: float) -> DdpgAgent:
    """theta' <- tau * theta' + (1 - tau) * theta for both target networks."""
    if not (0.0 <= tau <= 1.0):
        raise ValueError("tau must lie in [0, 1]")
    return replace_params(
        agent,
        q_target_params=nn.mix_params(agent.q_target_params, agent.q_params, tau),
        pi_target_params=nn.mix_params(agent.pi_target_params, agent.pi_params, tau),
    )


def replace_params(agent: DdpgAgent, **kw) -> DdpgAgent:
    # shallow copy + setattr is ~10x cheaper than dataclasses.replace and
    # this runs three times per training step
    new = copy.copy(agent)
    for k, v in kw.items():
        setattr(new, k, v)
    return new


_NET_FILES = {
    "q": "q.lrnn",
    "pi": "pi.lrnn",
    "q_target": "q_target.lrnn",
    "pi_target": "pi_target.lrnn",
}


def save_agent(out_dir, agent: DdpgAgent, manifest: dict) -> None:
    """Four network checkpoints plus a JSON manifest in a directory."""
    os.makedirs(out_dir, exist_ok=True)
    nn.save_params(os.path.join(out_dir, _NET_FILES["q"]), agent.q_params)
    nn.save_params(os.path.join(out_dir, _NET_FILES["pi"]), agent.pi_params)
    nn.save_params(os.path.join(out_dir, _NET_FILES["q_target"]), agent.q_target_params)
    nn.save_params(os.path.join(out_dir, _NET_FILES["pi_target"]), agent.pi_target_params)
    body = {
        "state_dim": agent.state_dim,
        "action_dim": agent.action_dim,
        "action_low": agent.action_low.tolist(),
        "action_high": agent.action_high.tolist(),
        "q_spec": {
            "layer_sizes": list(agent.q_spec.layer_sizes),
            "hidden_activation": agent.q_spec.hidden_activation,
            "output_activation": agent.q_spec.output_activation,
        },
        "pi_spec": {
            "layer_sizes": list(agent.pi_spec.layer_sizes),
            "hidden_activation": agent.pi_spec.hidden_activation,
            "output_activation": agent.pi_spec.output_activation,
        },
    }
    body.update(manifest)
    atomic_write_json(os.path.join(out_dir, "manifest.json"), body)


def load_agent(out_dir) -> tuple[DdpgAgent, dict]:
    with open(os.path.join(out_dir, "manifest.json")) as f:
        man = json.load(f)
    q_spec = nn.MlpSpec(tuple(man["q_spec"]["layer_sizes"]),
                        man["q_spec"]["hidden_activation"],
                        man["q_spec"]["output_activation"])
    pi_spec = nn.MlpSpec(tuple(man["pi_spec"]["layer_sizes"]),
                         man["pi_spec"]["hidden_activation"],
                         man["pi_spec"]["output_activation"])
    agent = DdpgAgent(
        state_dim=man["state_dim"],
        action_dim=man["action_dim"],
        action_low=np.asarray(man["action_low"], dtype=np.float64),
        action_high=np.asarray(man["action_high"], dtype=np.float64),
        q_spec=q_spec,
        q_params=nn.load_params(os.path.join(out_dir, _NET_FILES["q"]), q_spec),
        pi_spec=pi_spec,
        pi_params=nn.load_params(os.path.join(out_dir, _NET_FILES["pi"]), pi_spec),
        q_target_params=nn.load_params(os.path.join(out_dir, _NET_FILES["q_target"]), q_spec),
        pi_target_params=nn.load_params(os.path.join(out_dir, _NET_FILES["pi_target"]), pi_spec),
    )
    return agent, man
