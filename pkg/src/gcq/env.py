"""Episode wrapper tying the simulator, observation builder and reward together."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .observation import ObservationTensor, observe
from .reward import RewardBreakdown, total_reward
from .sim import Flows, SimState, StepEvents, step


@dataclass
class EpisodeStats:
    steps: int = 0
    reward_total: float = 0.0
    reward_intention: float = 0.0
    reward_speed: float = 0.0
    penalty_collision: float = 0.0
    penalty_lane_change: float = 0.0
    collisions: int = 0
    merges_ok: int = 0
    merges_failed: int = 0
    lane_changes: int = 0
    losses: list[float] = field(default_factory=list)

    def add(self, rb: RewardBreakdown, events: StepEvents) -> None:
        self.steps += 1
        self.reward_total += rb.total
        self.reward_intention += rb.intention
        self.reward_speed += rb.speed
        self.penalty_collision += rb.penalty_collision
        self.penalty_lane_change += rb.penalty_lane_change
        self.collisions += len(events.collisions)
        self.merges_ok += len(events.merged_out)
        self.lane_changes += events.cav_lane_changes
        self.merges_failed += len(events.missed_ramp)


class HighwayEnv:
    """One episode at a time; ``reset`` takes the episode seed.

    ``flows`` overrides the configured inflows, which is how the evaluation
    sweep varies the HDV density.
    """

    def __init__(self, config: RunConfig, flows: Flows | None = None):
        self.config = config
        self.road = config.road
        self.flows = flows or config.flows
        self.idm = config.idm.as_mapping()
        self.state: SimState | None = None
        self.stats = EpisodeStats()

    def reset(self, seed) -> ObservationTensor:
        self.state = SimState.new(seed, self.config.vehicle_length)
        self.stats = EpisodeStats()
        return self.observe()

    def observe(self) -> ObservationTensor:
        c = self.config
        return observe(self.state, self.road, c.sensing_range, c.n_max, c.ablation.no_fusion)

    def step(self, commands) -> tuple[StepEvents, RewardBreakdown]:
        c = self.config
        events = step(self.state, commands, self.flows, self.road, c.dt, self.idm, c.hysteresis)
        rb = total_reward(self.state, events, c.reward, self.road)
        self.stats.add(rb, events)
        return events, rb

    @property
    def horizon(self) -> int:
        return self.config.schedule.episode_horizon


def next_alive(obs: ObservationTensor, next_obs: ObservationTensor) -> np.ndarray:
    """1 for CAV slots of ``obs`` whose vehicle is still present in ``next_obs``."""
    present = np.isin(obs.slot_ids, next_obs.slot_ids[: next_obs.n_real])
    return ((obs.M > 0) & present & (obs.slot_ids >= 0)).astype(np.float64)
