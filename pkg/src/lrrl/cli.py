"""Command-line pipeline: gen-data, train-support, train, eval, report.

Each command reads an optional JSON config file; explicit flags override
config values. One seed per invocation. All outputs are written atomically.
Exit codes: 0 success, 2 unknown command or bad flags (argparse), 3 invalid
configuration, 4 IO failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import bench
from . import ddpg as dd
from . import lr as lrmod
from . import support_gan as sg
from .dataset import dataset_stats, generate_dataset, load_dataset, save_dataset
from .envs import behavior_policy, get_env
from .ioutil import atomic_write_json, atomic_write_text

ALGOS = {"lr-ddpg", "ddpg", "bc"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    env_id: str = "narrow_support_bandit"
    behavior: str = "suboptimal_pd"
    noise_std: float | None = None
    gain_scale: float | None = None
    n_transitions: int = 20000
    dataset_path: str = "data.lrds"
    output_dir: str = "."
    algo: str = "lr-ddpg"
    seed: int = 0
    seeds: list[int] = field(default_factory=lambda: [0])
    episodes: int = 20
    horizon: int | None = None
    eval_interval: int = 0
    metrics_interval: int = 250
    gan: sg.GanConfig = field(default_factory=sg.GanConfig)
    ddpg: dd.DdpgConfig = field(default_factory=dd.DdpgConfig)
    lr: lrmod.LrConfig = field(default_factory=lrmod.LrConfig)


_SUBCONFIGS = {"gan": sg.GanConfig, "ddpg": dd.DdpgConfig, "lr": lrmod.LrConfig}
_TUPLE_KEYS = {"gen_hidden", "dis_hidden", "actor_hidden", "critic_hidden"}


def load_run_config(path: str | None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    try:
        with open(path) as f:
            raw = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    try:
        for key, value in raw.items():
            if key in _SUBCONFIGS:
                if not isinstance(value, dict):
                    raise ConfigError(f"config section {key!r} must be an object")
                kw = {
                    k: tuple(v) if k in _TUPLE_KEYS else v
                    for k, v in value.items()
                }
                setattr(cfg, key, _SUBCONFIGS[key](**kw))
            elif hasattr(cfg, key):
                setattr(cfg, key, value)
            else:
                raise ConfigError(f"unknown config key {key!r}")
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"invalid config {path}: {e}") from e
    return cfg


def _out_path(path: str) -> str:
    """Relative paths resolve under LR_OUTPUT_DIR when it is set."""
    root = os.environ.get("LR_OUTPUT_DIR")
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _behavior(cfg: RunConfig):
    return behavior_policy(cfg.behavior, cfg.noise_std, cfg.gain_scale)


def cmd_gen_data(cfg: RunConfig, out: str | None) -> int:
    path = _out_path(out or cfg.dataset_path)
    d = generate_dataset(cfg.env_id, _behavior(cfg), cfg.n_transitions, cfg.seed)
    save_dataset(path, d)
    atomic_write_json(path + ".stats.json", dataset_stats(d))
    print(f"wrote {path} ({d.size} transitions) and {path}.stats.json")
    return 0


def cmd_train_support(cfg: RunConfig, data: str | None, out: str | None) -> int:
    d = load_dataset(_out_path(data or cfg.dataset_path))
    model = sg.train_gan(d, cfg.gan, cfg.seed)
    out_dir = _out_path(out or os.path.join(cfg.output_dir, "support"))
    sg.save_support_model(out_dir, model, cfg.gan, cfg.seed)
    curve = ["step,dis_loss,gen_loss"]
    for i, (dl, gl) in enumerate(model.training_curve):
        curve.append(f"{i + 1},{dl!r},{gl!r}")
    atomic_write_text(os.path.join(out_dir, "curve.csv"), "\n".join(curve) + "\n")
    print(f"wrote support model to {out_dir}")
    return 0


def _default_agent_dir(cfg: RunConfig, algo: str, seed: int) -> str:
    return os.path.join(cfg.output_dir, f"agent-{algo}-s{seed}")


def cmd_train(cfg: RunConfig, algo: str, data: str | None, support: str | None, out: str | None) -> int:
    if algo not in ALGOS:
        raise ConfigError(f"unknown algo {algo!r}; expected one of {sorted(ALGOS)}")
    d = load_dataset(_out_path(data or cfg.dataset_path))
    eval_hook = None
    if cfg.eval_interval > 0:
        env = get_env(d.meta.env_id)
        horizon = cfg.horizon or env.spec.horizon_default

        def eval_hook(agent):
            rep = bench.evaluate_policy(
                d.meta.env_id, agent, cfg.episodes, horizon, cfg.ddpg.gamma, cfg.seed
            )
            return rep.mean, rep.std

    fallback_rate = 0.0
    gate_threshold = None
    if algo == "lr-ddpg":
        sup_dir = _out_path(support or os.path.join(cfg.output_dir, "support"))
        if not os.path.isdir(sup_dir):
            raise ConfigError(f"lr-ddpg needs a support model; missing directory {sup_dir}")
        model = sg.load_support_model(sup_dir)
        agent, metrics, gate = lrmod.train_lr_ddpg(
            d, model, cfg.ddpg, cfg.lr, cfg.seed,
            metrics_interval=cfg.metrics_interval, eval_hook=eval_hook,
        )
        gate_threshold = gate.p
    elif algo == "ddpg":
        agent, metrics = lrmod.train_baseline(
            d, "naive_ddpg", cfg.ddpg, cfg.seed,
            metrics_interval=cfg.metrics_interval, eval_hook=eval_hook,
        )
    else:
        agent, metrics = lrmod.train_baseline(
            d, "behavior_clone", cfg.ddpg, cfg.seed,
            metrics_interval=cfg.metrics_interval, eval_hook=eval_hook,
        )
    if metrics.rows:
        fallback_rate = float(np.mean([r.fallback_rate for r in metrics.rows]))
    out_dir = _out_path(out or _default_agent_dir(cfg, algo, cfg.seed))
    manifest = {
        "algo": algo,
        "seed": cfg.seed,
        "step_count": cfg.ddpg.total_steps,
        "dataset": data or cfg.dataset_path,
        "config": {
            "gamma": cfg.ddpg.gamma,
            "tau": cfg.ddpg.tau,
            "lr_actor": cfg.ddpg.lr_actor,
            "lr_critic": cfg.ddpg.lr_critic,
            "batch_n": cfg.ddpg.batch_n,
            "total_steps": cfg.ddpg.total_steps,
            "actor_hidden": list(cfg.ddpg.actor_hidden),
            "critic_hidden": list(cfg.ddpg.critic_hidden),
        },
        "gate_threshold": gate_threshold,
        "mean_fallback_rate": fallback_rate,
    }
    dd.save_agent(out_dir, agent, manifest)
    metrics.to_csv(os.path.join(out_dir, "metrics.csv"))
    atomic_write_json(os.path.join(out_dir, "summary.json"), metrics.summary())
    print(f"wrote agent checkpoint to {out_dir}")
    return 0


def cmd_eval(cfg: RunConfig, checkpoint: str | None, data: str | None, support: str | None, out: str | None) -> int:
    ck = _out_path(checkpoint or _default_agent_dir(cfg, cfg.algo, cfg.seed))
    if not os.path.isfile(os.path.join(ck, "manifest.json")):
        raise OSError(f"checkpoint not found at {ck}")
    agent, manifest = dd.load_agent(ck)
    env = get_env(cfg.env_id)
    horizon = cfg.horizon or env.spec.horizon_default
    d = load_dataset(_out_path(data or cfg.dataset_path)) if (data or cfg.dataset_path) else None
    behavior_reference = None
    if d is not None:
        kind = d.behavior()
        rng = np.random.default_rng(cfg.seed)

        def beh_policy(state):
            from .envs import behavior_action

            return behavior_action(kind, state, rng)

        ref = bench.evaluate_policy(
            cfg.env_id, beh_policy, cfg.episodes, horizon, cfg.ddpg.gamma, cfg.seed, algo="behavior"
        )
        behavior_reference = ref.mean
    report = bench.evaluate_policy(
        cfg.env_id, agent, cfg.episodes, horizon, cfg.ddpg.gamma, cfg.seed,
        algo=manifest.get("algo", cfg.algo), behavior_reference=behavior_reference,
    )
    divergence = None
    if d is not None:
        spec = env.spec
        divergence = bench.q_divergence_diagnostic(
            agent, d, cfg.ddpg.gamma, (spec.reward_low, spec.reward_high)
        )
        if support:
            model = sg.load_support_model(_out_path(support))
            p = manifest.get("gate_threshold")
            if p is None:
                p = sg.calibrate_threshold(model, d, cfg.lr.p if cfg.lr.p_is_quantile else 0.1)
            divergence.rare_action_rate = bench.rare_action_rate(model, agent, d, p)
    rec = bench.run_record(
        report, cfg.seed, divergence, manifest.get("mean_fallback_rate", float("nan"))
    )
    out_path = _out_path(out or os.path.join(cfg.output_dir, f"eval-{rec.algo}-s{cfg.seed}.json"))
    atomic_write_json(out_path, bench.record_to_dict(rec) | {"schema": "lrrl-run-record"})
    print(f"wrote evaluation to {out_path}")
    return 0


def cmd_report(cfg: RunConfig, runs: list[str], out_prefix: str | None) -> int:
    if not runs:
        raise ConfigError("report needs at least one run JSON")
    records = []
    for path in runs:
        with open(_out_path(path)) as f:
            records.append(bench.record_from_dict(json.load(f)))
    prefix = _out_path(out_prefix or os.path.join(cfg.output_dir, "report"))
    bench.emit_report(records, prefix + ".json", prefix + ".csv")
    print(f"wrote {prefix}.json and {prefix}.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lrrl", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON run config")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("gen-data", help="collect an offline dataset")
    common(p)
    p.add_argument("--env", default=None)
    p.add_argument("--behavior", default=None)
    p.add_argument("--noise-std", type=float, default=None)
    p.add_argument("--gain-scale", type=float, default=None)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--out", default=None)

    p = sub.add_parser("train-support", help="train the support discriminator")
    common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--out", default=None)

    p = sub.add_parser("train", help="train lr-ddpg, ddpg, or bc")
    common(p)
    p.add_argument("--algo", default=None, choices=sorted(ALGOS))
    p.add_argument("--data", default=None)
    p.add_argument("--support", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--total-steps", type=int, default=None)
    p.add_argument("--eval-interval", type=int, default=None)

    p = sub.add_parser("eval", help="evaluate a trained checkpoint")
    common(p)
    p.add_argument("--env", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--support", default=None)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--out", default=None)

    p = sub.add_parser("report", help="aggregate run records into a table")
    common(p)
    p.add_argument("--runs", nargs="+", default=None)
    p.add_argument("--out-prefix", default=None)
    return ap


def _apply_flags(cfg: RunConfig, args) -> None:
    if args.seed is not None:
        cfg.seed = args.seed
    for flag, attr in (
        ("env", "env_id"),
        ("behavior", "behavior"),
        ("noise_std", "noise_std"),
        ("gain_scale", "gain_scale"),
        ("n", "n_transitions"),
        ("episodes", "episodes"),
        ("horizon", "horizon"),
        ("eval_interval", "eval_interval"),
    ):
        if getattr(args, flag, None) is not None:
            setattr(cfg, attr, getattr(args, flag))
    if getattr(args, "algo", None) is not None:
        cfg.algo = args.algo
    if getattr(args, "total_steps", None) is not None:
        cfg.ddpg = dd.DdpgConfig(**{**_ddpg_kw(cfg.ddpg), "total_steps": args.total_steps})


def _ddpg_kw(c: dd.DdpgConfig) -> dict:
    return {
        "gamma": c.gamma,
        "tau": c.tau,
        "lr_actor": c.lr_actor,
        "lr_critic": c.lr_critic,
        "batch_n": c.batch_n,
        "total_steps": c.total_steps,
        "actor_hidden": c.actor_hidden,
        "critic_hidden": c.critic_hidden,
    }


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config)
        _apply_flags(cfg, args)
        if args.command == "gen-data":
            return cmd_gen_data(cfg, args.out)
        if args.command == "train-support":
            return cmd_train_support(cfg, args.data, args.out)
        if args.command == "train":
            return cmd_train(cfg, cfg.algo, args.data, args.support, args.out)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.data, args.support, args.out)
        if args.command == "report":
            return cmd_report(cfg, args.runs or [], args.out_prefix)
        print(f"error: unknown: command {args.command!r}", file=sys.stderr)
        return 2
    except ConfigError as e:
        print(f"error: config: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"error: io: {e}", file=sys.stderr)
        return 4
    except Exception as e:  # keep failures single-line and machine-parseable
        print(f"error: internal: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
