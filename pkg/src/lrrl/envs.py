"""Deterministic toy control environments and scripted data-collection policies.

Two built-ins:

* ``point_mass_1d`` -- a 1-D double integrator with drag, driven toward a goal
  position; 200-step episodes.
* ``narrow_support_bandit`` -- a single-state continuing task whose reward
  peaks at an action the scripted suboptimal policy (almost) never takes, so
  datasets collected from it have a well-defined rare-action region.

Transitions are deterministic; all stochasticity enters through the scripted
behavior policies. Neither environment has true terminal states: episodes end
only by time limit, which matters for how trainers treat the ``done`` flag.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class MdpSpec:
    state_dim: int
    action_dim: int
    action_low: tuple[float, ...]
    action_high: tuple[float, ...]
    horizon_default: int
    reward_low: float
    reward_high: float

    def __post_init__(self):
        lo, hi = np.asarray(self.action_low), np.asarray(self.action_high)
        if not (lo < hi).all():
            raise ValueError("action_low must be < action_high elementwise")
        if self.reward_low >= self.reward_high:
            raise ValueError("reward_low must be < reward_high")

    @property
    def box_low(self) -> np.ndarray:
        return np.asarray(self.action_low, dtype=np.float64)

    @property
    def box_high(self) -> np.ndarray:
        return np.asarray(self.action_high, dtype=np.float64)


@dataclass(frozen=True)
class EnvState:
    env_id: str
    state: np.ndarray
    step_index: int


@dataclass(frozen=True)
class BehaviorPolicyKind:
    """Scripted dataset-collection policy: uniform, or a (scaled, noisy) PD law."""

    kind: str
    noise_std: float = 0.0
    gain_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("uniform_random", "suboptimal_pd", "expert_pd"):
            raise ValueError(f"unknown behavior kind {self.kind!r}")
        if self.noise_std < 0.0:
            raise ValueError("noise_std must be >= 0")


def behavior_policy(kind: str, noise_std: float | None = None, gain_scale: float | None = None) -> BehaviorPolicyKind:
    """BehaviorPolicyKind with per-kind defaults (suboptimal: weak gains, wide noise)."""
    defaults = {
        "uniform_random": (0.0, 1.0),
        "expert_pd": (0.0, 1.0),
        "suboptimal_pd": (0.3, 0.3),
    }
    if kind not in defaults:
        raise ValueError(f"unknown behavior kind {kind!r}")
    d_noise, d_gain = defaults[kind]
    return BehaviorPolicyKind(
        kind,
        d_noise if noise_std is None else float(noise_std),
        d_gain if gain_scale is None else float(gain_scale),
    )


class PointMass1d:
    """pos' = pos + dt*vel; vel' = vel + dt*(a - c*vel); reward penalizes
    squared distance to the goal plus a small action cost."""

    env_id = "point_mass_1d"
    time_limit_only = True
    DT = 0.05
    DRAG = 0.1
    GOAL = 0.5

    spec = MdpSpec(
        state_dim=2,
        action_dim=1,
        action_low=(-1.0,),
        action_high=(1.0,),
        horizon_default=200,
        # worst-case |pos| stays below ~38 even under saturated control
        reward_low=-1500.0,
        reward_high=0.0,
    )

    def reset(self, rng: np.random.Generator) -> EnvState:
        pos = rng.uniform(-1.0, 1.0)
        return EnvState(self.env_id, np.array([pos, 0.0]), 0)

    def step(self, state: EnvState, action: np.ndarray):
        pos, vel = state.state
        a = float(action[0])
        pos2 = pos + self.DT * vel
        vel2 = vel + self.DT * (a - self.DRAG * vel)
        reward = -((pos2 - self.GOAL) ** 2) - 0.001 * a * a
        nxt = EnvState(self.env_id, np.array([pos2, vel2]), state.step_index + 1)
        done = state.step_index + 1 >= self.spec.horizon_default
        return nxt, reward, done

    def pd_action(self, state: EnvState, gain_scale: float) -> float:
        pos, vel = state.state
        return gain_scale * (2.0 * (self.GOAL - pos) - 1.0 * vel)


class NarrowSupportBandit:
    """Single-state task, reward 1 - (a - 0.8)^2: the optimum sits outside the
    region a narrow behavior policy covers."""

    env_id = "narrow_support_bandit"
    time_limit_only = True
    OPTIMUM = 0.8

    spec = MdpSpec(
        state_dim=1,
        action_dim=1,
        action_low=(-1.0,),
        action_high=(1.0,),
        horizon_default=1,
        reward_low=1.0 - (-1.0 - 0.8) ** 2,
        reward_high=1.0,
    )

    def reset(self, rng: np.random.Generator) -> EnvState:
        return EnvState(self.env_id, np.array([0.0]), 0)

    def step(self, state: EnvState, action: np.ndarray):
        a = float(action[0])
        reward = 1.0 - (a - self.OPTIMUM) ** 2
        nxt = EnvState(self.env_id, np.array([0.0]), state.step_index + 1)
        return nxt, reward, True

    def pd_action(self, state: EnvState, gain_scale: float) -> float:
        # PD laws degenerate on the single state: they center on a = 0
        return 0.0


_REGISTRY: dict[str, object] = {}


def register_env(env) -> None:
    _REGISTRY[env.env_id] = env


def get_env(env_id: str):
    try:
        return _REGISTRY[env_id]
    except KeyError:
        raise KeyError(f"unknown env_id {env_id!r}; known: {sorted(_REGISTRY)}") from None


register_env(PointMass1d())
register_env(NarrowSupportBandit())


def env_reset(env_id: str, seed: int) -> EnvState:
    """Deterministic initial state for (env_id, seed)."""
    return get_env(env_id).reset(np.random.default_rng(seed))


def env_step(state: EnvState, action: np.ndarray):
    action = np.asarray(action, dtype=np.float64)
    env = get_env(state.env_id)
    if action.shape != (env.spec.action_dim,):
        raise ValueError(f"action shape {action.shape}, expected {(env.spec.action_dim,)}")
    return env.step(state, action)


def behavior_action(kind: BehaviorPolicyKind, state: EnvState, rng: np.random.Generator) -> np.ndarray:
    """One action from the scripted policy, clipped to the action box."""
    env = get_env(state.env_id)
    spec = env.spec
    if kind.kind == "uniform_random":
        a = rng.uniform(spec.box_low, spec.box_high)
    else:
        center = env.pd_action(state, kind.gain_scale)
        a = center + rng.normal(0.0, kind.noise_std, size=spec.action_dim)
    return np.clip(np.asarray(a, dtype=np.float64), spec.box_low, spec.box_high)


def rollout(env_or_id, policy, horizon: int, gamma: float, seed: int, rng=None):
    """Run one episode; returns (transitions, discounted_return).

    ``policy`` maps EnvState -> action vector. The stored ``done`` flag is the
    environment's episode-end signal. An explicit ``rng`` overrides ``seed``.
    """
    from .dataset import Transition

    if not (0.0 <= gamma <= 1.0):
        raise ValueError("gamma must lie in [0, 1]")
    env = get_env(env_or_id) if isinstance(env_or_id, str) else env_or_id
    if rng is None:
        rng = np.random.default_rng(seed)
    state = env.reset(rng)
    episode = []
    ret = 0.0
    for t in range(horizon):
        action = np.asarray(policy(state), dtype=np.float64)
        nxt, reward, done = env.step(state, action)
        episode.append(Transition(state.state.copy(), action.copy(), reward, nxt.state.copy(), done))
        ret += (gamma**t) * reward
        state = nxt
        if done:
            break
    return episode, ret
