"""Command-line entry point: ``gcq {train,eval,rollout,gradcheck,describe}``.

Failures print a single line ``error: <ErrorType>: <message>`` on stderr and
exit with status 1. Bad flags print the usage text and exit with status 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config, parse_config_text
from .dqn import run_training
from .evaluate import DEFAULT_INFLOWS, episode_seed, evaluate, load_network, make_policy
from .env import HighwayEnv
from .model import GCQNetwork, gradcheck_max_error
from .nn import load_checkpoint
from .sim import TrajectoryRecorder

GRADCHECK_TOLERANCE = 1e-4


def _parse_overrides(pairs: list[str]) -> dict:
    text = "\n".join(pairs)
    return parse_config_text(text)


def _inflows(text: str) -> tuple[float, ...]:
    try:
        values = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if not values or any(v < 0 for v in values):
        raise argparse.ArgumentTypeError("inflows must be a non-empty list of non-negative numbers")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gcq", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a GCQ network")
    p.add_argument("--config", type=Path, help="flat 'key = value' config file (default: desk preset)")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="extra config override, repeatable")

    p = sub.add_parser("eval", help="density sweep of a checkpoint and optional baselines")
    p.add_argument("--checkpoint", required=True, help="checkpoint path, or 'rule_based' / 'random'")
    p.add_argument("--inflows", type=_inflows, default=DEFAULT_INFLOWS, help="e.g. 0.1,0.3,0.5")
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--config", type=Path, help="evaluation scenario (default: the checkpoint's own)")
    p.add_argument("--baselines", default="", help="comma list from rule_based,random")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("rollout", help="record one episode's trajectories")
    p.add_argument("--policy", required=True, help="'rule_based', 'random' or a checkpoint path")
    p.add_argument("--steps", type=int, default=600)
    p.add_argument("--dump-obs", action="store_true", help="also write every observation as JSON lines")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--config", type=Path)
    p.add_argument("--inflow", type=float, help="HDV inflow in veh/s (default: configured)")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    p.add_argument("--seeds", type=int, default=20)

    p = sub.add_parser("describe", help="per-layer shapes and parameter count")
    p.add_argument("--checkpoint", type=Path)
    return parser


def cmd_train(args) -> int:
    overrides = _parse_overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    config = load_config(args.config, **{k.replace(".", "__"): v for k, v in overrides.items()})
    result = run_training(config, args.out)
    print(json.dumps({"out": str(result.out_dir), "final_checkpoint": str(result.final_checkpoint),
                      "episodes": len(result.records)}))
    return 0


def cmd_eval(args) -> int:
    if args.episodes < 1:
        raise ValueError("--episodes must be >= 1")
    config = load_config(args.config) if args.config is not None else None
    policy, config = make_policy(args.checkpoint, config)
    report = evaluate(policy, config, args.inflows, args.episodes, args.seed, args.workers)
    for name in filter(None, (s.strip() for s in args.baselines.split(","))):
        if name not in ("rule_based", "random"):
            raise ValueError(f"unknown baseline {name!r}")
        base, _ = make_policy(name, config)
        report = report.merge(evaluate(base, config, args.inflows, args.episodes, args.seed, args.workers))
    jpath, cpath = report.write(args.out)
    for c in report.cells:
        print(f"{c.policy:>10} inflow={c.hdv_inflow:.2f} mean={c.mean:.2f} median={c.median:.2f} "
              f"std={c.std:.2f} collisions/ep={c.collision_rate:.2f}")
    print(json.dumps({"json": str(jpath), "csv": str(cpath)}))
    return 0


def cmd_rollout(args) -> int:
    config = load_config(args.config) if args.config is not None else None
    policy, config = make_policy(args.policy, config)
    flows = config.flows if args.inflow is None else replace(config.flows, hdv=args.inflow)
    env = HighwayEnv(config, flows)
    obs = env.reset(episode_seed(args.seed, flows.hdv, 0))
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 400]))
    recorder = TrajectoryRecorder()
    args.out.mkdir(parents=True, exist_ok=True)
    obs_fh = open(args.out / "observations.jsonl", "w") if args.dump_obs else None
    try:
        for t in range(args.steps):
            if obs_fh is not None:
                obs_fh.write(json.dumps({"step": env.state.time_step, **obs.to_json()}) + "\n")
            events, _ = env.step(policy.act(env, obs, rng))
            recorder.record(env.state, events)
            obs = env.observe()
            if events.terminal_collision:
                break
    finally:
        if obs_fh is not None:
            obs_fh.close()
    recorder.write_csv(args.out / "trajectories.csv")
    recorder.write_events(args.out / "events.jsonl")
    st = env.stats
    print(json.dumps({"policy": policy.name, "steps": st.steps, "reward_total": st.reward_total,
                      "collisions": st.collisions, "merges_ok": st.merges_ok, "out": str(args.out)}))
    return 0


def cmd_gradcheck(args) -> int:
    if args.seeds < 1:
        raise ValueError("--seeds must be >= 1")
    err = gradcheck_max_error(range(args.seeds))
    ok = err < GRADCHECK_TOLERANCE
    print(f"max_relative_error={err:.3e} seeds={args.seeds} tolerance={GRADCHECK_TOLERANCE:g} "
          f"{'ok' if ok else 'FAILED'}")
    return 0 if ok else 1


def cmd_describe(args) -> int:
    net = GCQNetwork()
    if args.checkpoint is not None:
        params, _ = load_checkpoint(args.checkpoint)
        net.load(params)
    for name, shape, size in net.describe():
        print(f"{name:<14} {'x'.join(map(str, shape)):>8} {size:>6}")
    print(f"total {net.count_parameters()}")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "rollout": cmd_rollout,
            "gradcheck": cmd_gradcheck, "describe": cmd_describe}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, OSError, ValueError, KeyError, RuntimeError) as exc:
        message = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
