"""Shared cooperative reward: intention schedule, speed term and penalties."""

from __future__ import annotations

from dataclasses import dataclass

from .sim import Intention, Kind, RoadSpec, SimState, StepEvents, Vehicle

CATEGORIES = ("p11", "r11", "p21", "p22", "r22", "none")


@dataclass(frozen=True)
class RewardWeights:
    w1: float = 1.0
    w2: float = 1.0
    w3: float = 1.0
    w4: float = 1.0
    collision_value: float = 50.0
    lane_change_value: float = 0.5
    # literal table reading: penalize ramp-2 CAVs on the top lane in the first segment
    p21_top_lane: bool = False

    def __post_init__(self):
        for name in ("w1", "w2", "w3", "w4", "collision_value", "lane_change_value"):
            if getattr(self, name) < 0:
                raise ValueError(f"RewardWeights.{name} must be non-negative")


@dataclass(frozen=True)
class IntentionTerm:
    vehicle_id: int
    category: str
    value: float

    @property
    def signed_value(self) -> float:
        if self.category == "none":
            return 0.0
        return self.value if self.category.startswith("r") else -self.value


@dataclass(frozen=True)
class RewardBreakdown:
    intention: float
    speed: float
    penalty_collision: float
    penalty_lane_change: float
    total: float

    def as_dict(self) -> dict:
        return {
            "reward_intention": self.intention,
            "reward_speed": self.speed,
            "penalty_collision": self.penalty_collision,
            "penalty_lane_change": self.penalty_lane_change,
            "reward_total": self.total,
        }


def schedule_value(category: str, x: float, length: float) -> float:
    """Magnitude of a table entry: penalties grow 0 to 1, rewards shrink 1 to 0 over ``length``."""
    if category == "none":
        return 0.0
    frac = x / length
    return 1.0 - frac if category.startswith("r") else frac


def intention_term(vehicle: Vehicle, road: RoadSpec, p21_top_lane: bool = False) -> IntentionTerm:
    """Segment-relative reward or penalty of one vehicle; ``x`` restarts at each segment."""
    vid = vehicle.id
    if vehicle.kind != Kind.CAV or vehicle.intention not in (Intention.RAMP1, Intention.RAMP2):
        return IntentionTerm(vid, "none", 0.0)
    seg = road.segment_of(vehicle.position)
    start = road.segment_bounds[seg][0]
    x = vehicle.position - start
    on_bottom = vehicle.lane == 0
    if vehicle.intention == Intention.RAMP1:
        if seg == 0:
            cat = "r11" if on_bottom else "p11"
            return IntentionTerm(vid, cat, schedule_value(cat, x, road.L1))
        return IntentionTerm(vid, "none", 0.0)
    if seg == 0:
        blocking = vehicle.lane == road.top_lane if p21_top_lane else on_bottom
        if blocking:
            return IntentionTerm(vid, "p21", schedule_value("p21", x, road.L1))
        return IntentionTerm(vid, "none", 0.0)
    if seg == 1:
        cat = "r22" if on_bottom else "p22"
        return IntentionTerm(vid, cat, schedule_value(cat, x, road.L2))
    return IntentionTerm(vid, "none", 0.0)


def intention_reward(state: SimState, road: RoadSpec, p21_top_lane: bool = False) -> float:
    return sum(
        intention_term(v, road, p21_top_lane).signed_value
        for v in state.vehicles.values() if v.kind == Kind.CAV
    )


def speed_reward(state: SimState, v_max: float) -> float:
    speeds = [v.speed for v in state.vehicles.values() if v.kind == Kind.CAV]
    if not speeds:
        return 0.0
    return sum(s / v_max for s in speeds) / len(speeds)


def total_reward(state: SimState, events: StepEvents, weights: RewardWeights,
                 road: RoadSpec) -> RewardBreakdown:
    r_i = intention_reward(state, road, weights.p21_top_lane)
    r_v = speed_reward(state, road.speed_limit_cav)
    p_c = weights.collision_value * len(events.collisions)
    p_lc = weights.lane_change_value * events.cav_lane_changes
    total = weights.w1 * r_i + weights.w2 * r_v - weights.w3 * p_c - weights.w4 * p_lc
    return RewardBreakdown(r_i, r_v, p_c, p_lc, total)
