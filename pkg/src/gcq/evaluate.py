"""Density sweep: seeded greedy episodes per (policy, HDV inflow) cell."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .baselines import GreedyQPolicy, RandomPolicy, RuleBasedPolicy
from .config import RunConfig, from_flat
from .env import HighwayEnv
from .model import GCQNetwork
from .nn import load_checkpoint

DEFAULT_INFLOWS = (0.1, 0.2, 0.3, 0.4, 0.5)


class StaleCheckpointError(ValueError):
    pass


@dataclass
class CellStats:
    policy: str
    hdv_inflow: float
    episodes: int
    mean: float
    median: float
    std: float
    collision_rate: float
    merge_success_rate: float | None


@dataclass
class EvalReport:
    cells: list[CellStats] = field(default_factory=list)
    episodes: list[dict] = field(default_factory=list)

    def cell(self, policy: str, hdv_inflow: float) -> CellStats:
        for c in self.cells:
            if c.policy == policy and np.isclose(c.hdv_inflow, hdv_inflow):
                return c
        raise KeyError((policy, hdv_inflow))

    def rewards(self, policy: str, hdv_inflow: float) -> np.ndarray:
        return np.array([e["reward_total"] for e in self.episodes
                         if e["policy"] == policy and np.isclose(e["hdv_inflow"], hdv_inflow)])

    def merge(self, other: "EvalReport") -> "EvalReport":
        return EvalReport(self.cells + other.cells, self.episodes + other.episodes)

    def to_json(self) -> dict:
        return {"cells": [asdict(c) for c in self.cells], "episodes": self.episodes}

    def write(self, out_dir: str | Path) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        jpath, cpath = out / "eval_report.json", out / "eval_report.csv"
        jpath.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))
        with open(cpath, "w", newline="") as fh:
            writer = csv.writer(fh)
            names = [f.name for f in CellStats.__dataclass_fields__.values()]
            writer.writerow(names)
            for c in self.cells:
                writer.writerow([getattr(c, n) for n in names])
        return jpath, cpath


def summarize(policy: str, hdv_inflow: float, episodes: list[dict]) -> CellStats:
    if not episodes:
        raise ValueError("at least one completed episode is needed")
    rewards = np.array([e["reward_total"] for e in episodes])
    ok = sum(e["merges_ok"] for e in episodes)
    failed = sum(e["merges_failed"] for e in episodes)
    return CellStats(
        policy=policy, hdv_inflow=hdv_inflow, episodes=len(episodes),
        mean=float(rewards.mean()), median=float(np.median(rewards)),
        std=float(rewards.std(ddof=1)) if len(rewards) > 1 else 0.0,
        collision_rate=float(np.mean([e["collisions"] for e in episodes])),
        merge_success_rate=ok / (ok + failed) if ok + failed else None,
    )


def episode_seed(seed: int, hdv_inflow: float, episode: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, 200, int(round(hdv_inflow * 1000)), episode])


def run_episode(policy, config: RunConfig, hdv_inflow: float, seed: int, episode: int,
                recorder=None) -> dict:
    """One greedy episode; ends at the first collision or at the horizon."""
    flows = replace(config.flows, hdv=hdv_inflow)
    env = HighwayEnv(config, flows)
    obs = env.reset(episode_seed(seed, hdv_inflow, episode))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 300, int(round(hdv_inflow * 1000)), episode]))
    for _ in range(env.horizon):
        commands = policy.act(env, obs, rng)
        events, _ = env.step(commands)
        if recorder is not None:
            recorder.record(env.state, events)
        obs = env.observe()
        if events.terminal_collision:
            break
    st = env.stats
    return {
        "policy": policy.name, "hdv_inflow": hdv_inflow, "episode": episode, "steps": st.steps,
        "reward_total": st.reward_total, "reward_intention": st.reward_intention,
        "reward_speed": st.reward_speed, "penalty_collision": st.penalty_collision,
        "penalty_lane_change": st.penalty_lane_change, "collisions": st.collisions,
        "merges_ok": st.merges_ok, "merges_failed": st.merges_failed, "lane_changes": st.lane_changes,
    }


def _run_args(args):
    return run_episode(*args)


def evaluate(policy, config: RunConfig, inflow_grid=DEFAULT_INFLOWS, episodes: int = 10,
             seed: int = 0, workers: int = 1) -> EvalReport:
    """Run ``episodes`` seeded episodes per inflow. Seeds do not depend on the policy,
    so different policies face the same traffic draws."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    jobs = [(policy, config, float(q), seed, e) for q in inflow_grid for e in range(episodes)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_args, jobs))
    else:
        results = [_run_args(j) for j in jobs]
    report = EvalReport(episodes=results)
    for q in inflow_grid:
        cell_eps = [r for r in results if np.isclose(r["hdv_inflow"], q)]
        report.cells.append(summarize(policy.name, float(q), cell_eps))
    return report


def load_network(path: str | Path, config: RunConfig | None = None) -> tuple[GCQNetwork, RunConfig]:
    """Network and its training config from a checkpoint.

    When ``config`` is given its structural digest must match the one stored
    in the checkpoint (flows and training schedule may differ).
    """
    params, header = load_checkpoint(path)
    meta = header.get("meta", {})
    ckpt_config = from_flat(meta["config"]) if "config" in meta else None
    if config is None:
        if ckpt_config is None:
            raise StaleCheckpointError(f"{path}: checkpoint carries no config; pass one explicitly")
        config = ckpt_config
    stored = meta.get("structural_digest")
    if stored is not None and stored != config.structural_digest():
        raise StaleCheckpointError(
            f"{path}: checkpoint scenario digest {stored[:12]} != evaluation config {config.structural_digest()[:12]}"
        )
    net = GCQNetwork()
    net.load(params)
    return net, config


def make_policy(name: str, config: RunConfig | None = None):
    """``rule_based``, ``random`` or a checkpoint path. Returns (policy, config)."""
    if name == "rule_based":
        config = config or RunConfig()
        return RuleBasedPolicy(config.mandatory_distance), config
    if name == "random":
        return RandomPolicy(), config or RunConfig()
    net, config = load_network(name, config)
    return GreedyQPolicy(net), config
