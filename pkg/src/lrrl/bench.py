"""Post-training evaluation, value-explosion diagnostics, and report emission.

Everything here runs after training: seeded environment rollouts of the
frozen actor, checks of the critic's magnitudes against the analytic
discounted-reward bound, the rate at which the actor leaves the dataset's
support, and machine-readable comparison tables.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nn
from .dataset import FixedDataset
from .ddpg import DdpgAgent, policy_action
from .envs import get_env, rollout
from .ioutil import atomic_write_json, atomic_write_text
from .support_gan import SupportModel, confidence


@dataclass(frozen=True)
class EvalReport:
    algo: str
    env_id: str
    episodes: int
    returns: list[float]
    disc_returns: list[float]
    mean: float
    std: float
    min: float
    max: float
    mean_disc: float
    behavior_reference: float | None
    seeds: list[int]


@dataclass
class DivergenceReport:
    max_abs_q: float
    q_bound: float
    frac_exceeding: float
    rare_action_rate: float = float("nan")


def _episode_seed(seed: int, i: int) -> int:
    return int(np.random.SeedSequence((seed, i)).generate_state(1)[0])


def evaluate_policy(
    env_id: str,
    agent_or_policy,
    episodes: int,
    horizon: int,
    gamma: float,
    seed: int,
    algo: str = "agent",
    behavior_reference: float | None = None,
) -> EvalReport:
    """Monte-Carlo returns of the deterministic actor over seeded rollouts.

    ``agent_or_policy`` is a DdpgAgent or any callable EnvState -> action.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    if isinstance(agent_or_policy, DdpgAgent):
        agent = agent_or_policy

        def policy(state):
            return policy_action(agent, state.state)

    else:
        policy = agent_or_policy
    env = get_env(env_id) if isinstance(env_id, str) else env_id
    rets, dis, seeds = [], [], []
    for i in range(episodes):
        ep_seed = _episode_seed(seed, i)
        episode, disc = rollout(env, policy, horizon, gamma, ep_seed)
        rets.append(float(sum(t.r for t in episode)))
        dis.append(float(disc))
        seeds.append(ep_seed)
    r = np.asarray(rets)
    return EvalReport(
        algo=algo,
        env_id=env.env_id,
        episodes=episodes,
        returns=rets,
        disc_returns=dis,
        mean=float(r.mean()),
        std=float(r.std()),
        min=float(r.min()),
        max=float(r.max()),
        mean_disc=float(np.mean(dis)),
        behavior_reference=behavior_reference,
        seeds=seeds,
    )


def q_divergence_diagnostic(
    agent: DdpgAgent, d: FixedDataset, gamma: float, reward_bounds: tuple[float, float]
) -> DivergenceReport:
    """|Q| over all dataset pairs against the geometric-sum bound
    max(|r_min|, |r_max|) / (1 - gamma)."""
    if gamma >= 1.0:
        raise ValueError("q bound undefined for gamma >= 1")
    r_lo, r_hi = reward_bounds
    bound = max(abs(r_lo), abs(r_hi)) / (1.0 - gamma)
    q = nn.mlp_forward(agent.q_spec, agent.q_params, d.pairs())[:, 0]
    absq = np.abs(q)
    return DivergenceReport(
        max_abs_q=float(absq.max()),
        q_bound=float(bound),
        frac_exceeding=float(np.mean(absq > bound)),
    )


def rare_action_rate(m: SupportModel, agent: DdpgAgent, d: FixedDataset, p: float) -> float:
    """Fraction of dataset states where the actor's own action scores below
    the support threshold."""
    if not (0.0 <= p <= 1.0):
        raise ValueError("p must lie in [0, 1]")
    actions = policy_action(agent, d.s)
    conf = confidence(m, d.s, actions)
    return float(np.mean(conf < p))


REPORT_FIELDS = [
    "algo",
    "env",
    "seed",
    "episodes",
    "mean_return",
    "std_return",
    "min_return",
    "max_return",
    "mean_disc_return",
    "max_abs_q",
    "q_bound",
    "frac_exceeding",
    "rare_action_rate",
    "fallback_rate",
]


@dataclass
class RunRecord:
    """One comparison-table row: evaluation plus diagnostics for one run."""

    algo: str
    env: str
    seed: int
    episodes: int
    mean_return: float
    std_return: float
    min_return: float
    max_return: float
    mean_disc_return: float
    max_abs_q: float = float("nan")
    q_bound: float = float("nan")
    frac_exceeding: float = float("nan")
    rare_action_rate: float = float("nan")
    fallback_rate: float = float("nan")
    returns: list[float] = field(default_factory=list)
    disc_returns: list[float] = field(default_factory=list)
    behavior_reference: float | None = None


def run_record(
    eval_report: EvalReport,
    seed: int,
    divergence: DivergenceReport | None = None,
    fallback_rate: float = float("nan"),
) -> RunRecord:
    rec = RunRecord(
        algo=eval_report.algo,
        env=eval_report.env_id,
        seed=seed,
        episodes=eval_report.episodes,
        mean_return=eval_report.mean,
        std_return=eval_report.std,
        min_return=eval_report.min,
        max_return=eval_report.max,
        mean_disc_return=eval_report.mean_disc,
        returns=eval_report.returns,
        disc_returns=eval_report.disc_returns,
        behavior_reference=eval_report.behavior_reference,
        fallback_rate=fallback_rate,
    )
    if divergence is not None:
        rec.max_abs_q = divergence.max_abs_q
        rec.q_bound = divergence.q_bound
        rec.frac_exceeding = divergence.frac_exceeding
        rec.rare_action_rate = divergence.rare_action_rate
    return rec


def record_to_dict(rec: RunRecord) -> dict:
    d = {f: getattr(rec, f) for f in REPORT_FIELDS}
    d["returns"] = rec.returns
    d["disc_returns"] = rec.disc_returns
    d["behavior_reference"] = rec.behavior_reference
    return d


def record_from_dict(d: dict) -> RunRecord:
    return RunRecord(
        algo=d["algo"],
        env=d["env"],
        seed=int(d["seed"]),
        episodes=int(d["episodes"]),
        mean_return=d["mean_return"],
        std_return=d["std_return"],
        min_return=d["min_return"],
        max_return=d["max_return"],
        mean_disc_return=d["mean_disc_return"],
        max_abs_q=_nan_if_none(d.get("max_abs_q")),
        q_bound=_nan_if_none(d.get("q_bound")),
        frac_exceeding=_nan_if_none(d.get("frac_exceeding")),
        rare_action_rate=_nan_if_none(d.get("rare_action_rate")),
        fallback_rate=_nan_if_none(d.get("fallback_rate")),
        returns=list(d.get("returns", [])),
        disc_returns=list(d.get("disc_returns", [])),
        behavior_reference=d.get("behavior_reference"),
    )


def _nan_if_none(v):
    return float("nan") if v is None else float(v)


def _json_safe(v):
    if isinstance(v, float) and not np.isfinite(v):
        return None
    return v


def emit_report(records: list[RunRecord], json_path, csv_path) -> None:
    """One CSV row and one JSON entry per (algo, env, seed) run; field order
    is fixed so reruns produce identical files."""
    if not records:
        raise ValueError("at least one record required")
    lines = [",".join(REPORT_FIELDS)]
    for r in records:
        cells = [
            v if isinstance(v, str) else repr(v)
            for v in (getattr(r, f) for f in REPORT_FIELDS)
        ]
        lines.append(",".join(cells))
    atomic_write_text(csv_path, "\n".join(lines) + "\n")
    bundle = {
        "records": [
            {k: _json_safe(v) for k, v in record_to_dict(r).items()} for r in records
        ]
    }
    atomic_write_json(json_path, bundle)


def load_report(json_path) -> list[RunRecord]:
    with open(json_path) as f:
        bundle = json.load(f)
    return [record_from_dict(d) for d in bundle["records"]]
