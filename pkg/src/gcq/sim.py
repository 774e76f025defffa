"""Seeded multi-lane highway micro-simulator with two off-ramps.

Longitudinal motion follows the Intelligent Driver Model. Human-driven
vehicles (HDVs) change lanes with a MOBIL-style incentive rule behind a
safety gate; connected autonomous vehicles (CAVs) change lanes only on
external command, without any safety check.

Positions are front-bumper coordinates in meters from the corridor entry, so
a vehicle occupies ``[position - length, position]``. Lane 0 is the
rightmost (ramp-connected) lane.
"""

from __future__ import annotations

import csv
import enum
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping

import numpy as np

LOG = logging.getLogger(__name__)

NO_LEADER_GAP = 1.0e4
SPEED_SLACK = 0.5


class Kind(enum.IntEnum):
    CAV = 0
    HDV = 1


class Intention(enum.IntEnum):
    RAMP1 = 0
    RAMP2 = 1
    THROUGH = 2
    UNOBSERVED = 3


class Command(enum.IntEnum):
    """Lane-change command; the value is the Q-value column index."""

    LEFT = 0
    KEEP = 1
    RIGHT = 2


@dataclass(frozen=True)
class RoadSpec:
    corridor_length: float = 500.0
    lane_count: int = 3
    ramp_positions: tuple[float, ...] = (200.0, 400.0)
    speed_limit_cav: float = 14.0
    speed_limit_hdv: float = 10.0
    merge_window: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "ramp_positions", tuple(float(r) for r in self.ramp_positions))
        if self.lane_count < 2:
            raise ValueError(f"lane_count must be >= 2, got {self.lane_count}")
        if len(self.ramp_positions) != 2:
            raise ValueError("exactly two ramp positions are supported")
        prev = 0.0
        for r in self.ramp_positions:
            if not prev < r < self.corridor_length:
                raise ValueError(
                    f"ramp positions must be strictly increasing inside (0, {self.corridor_length}): "
                    f"{self.ramp_positions}"
                )
            prev = r
        if self.speed_limit_cav <= 0 or self.speed_limit_hdv <= 0:
            raise ValueError("speed limits must be positive")
        if self.merge_window <= 0:
            raise ValueError("merge_window must be positive")

    @property
    def segment_bounds(self) -> tuple[tuple[float, float], ...]:
        edges = (0.0, *self.ramp_positions, self.corridor_length)
        return tuple(zip(edges[:-1], edges[1:]))

    @property
    def L1(self) -> float:
        return self.ramp_positions[0]

    @property
    def L2(self) -> float:
        return self.ramp_positions[1] - self.ramp_positions[0]

    def segment_of(self, position: float) -> int:
        """0-based segment index of ``position`` (clamped to the last segment)."""
        for i, (_, hi) in enumerate(self.segment_bounds):
            if position < hi:
                return i
        return len(self.ramp_positions)

    def speed_limit(self, kind: Kind) -> float:
        return self.speed_limit_cav if kind == Kind.CAV else self.speed_limit_hdv

    @property
    def top_lane(self) -> int:
        return self.lane_count - 1


@dataclass(frozen=True)
class IdmParams:
    max_accel: float = 1.0
    comfortable_decel: float = 1.5
    min_gap: float = 2.0
    headway_time: float = 1.5
    accel_exponent: float = 4.0
    emergency_decel: float = 6.0
    # None: use the speed limit of the vehicle's kind
    desired_speed: float | None = None

    def __post_init__(self):
        values = asdict(self)
        for name, value in values.items():
            if value is not None and value <= 0:
                raise ValueError(f"IdmParams.{name} must be strictly positive, got {value}")


@dataclass(frozen=True)
class Flows:
    """Inflow rates in veh/s per vehicle class."""

    hdv: float = 0.2
    cav_ramp1: float = 0.1
    cav_ramp2: float = 0.1

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"flow {name} must be >= 0, got {value}")


IdmSpec = IdmParams | Mapping[Kind, IdmParams]


def _idm_for(idm: IdmSpec, kind: Kind) -> IdmParams:
    if isinstance(idm, IdmParams):
        return idm
    return idm[kind]


@dataclass(slots=True)
class Vehicle:
    id: int
    kind: Kind
    intention: Intention
    lane: int
    position: float
    speed: float
    length: float = 5.0
    alive: bool = True
    missed_ramp: bool = False

    @property
    def rear(self) -> float:
        return self.position - self.length

    @property
    def target_ramp(self) -> int | None:
        """0-based index of the ramp this vehicle wants to take, if any."""
        if self.kind == Kind.CAV and self.intention in (Intention.RAMP1, Intention.RAMP2):
            return int(self.intention)
        return None

    def copy(self) -> "Vehicle":
        return Vehicle(
            self.id, self.kind, self.intention, self.lane, self.position,
            self.speed, self.length, self.alive, self.missed_ramp,
        )


@dataclass
class SimState:
    rng: np.random.Generator
    time_step: int = 0
    vehicles: dict[int, Vehicle] = field(default_factory=dict)
    next_id: int = 0
    spawned: int = 0
    merged_ok: int = 0
    merged_fail: int = 0
    reached_end: int = 0
    collision_pairs: int = 0
    collided: int = 0
    vehicle_length: float = 5.0

    @classmethod
    def new(cls, seed: int | np.random.SeedSequence, vehicle_length: float = 5.0) -> "SimState":
        return cls(rng=np.random.default_rng(seed), vehicle_length=vehicle_length)

    def alive(self) -> list[Vehicle]:
        """Alive vehicles in ascending id order."""
        return [v for v in self.vehicles.values() if v.alive]

    def add_vehicle(self, kind: Kind, intention: Intention, lane: int, position: float,
                    speed: float, length: float | None = None) -> Vehicle:
        """Insert a vehicle with a fresh id (used by spawning and by hand-built scenes)."""
        if kind == Kind.HDV and intention != Intention.UNOBSERVED:
            raise ValueError("HDVs carry the Unobserved intention")
        if kind == Kind.CAV and intention == Intention.UNOBSERVED:
            raise ValueError("CAVs need an observable intention")
        veh = Vehicle(self.next_id, kind, intention, lane, float(position), float(speed),
                      self.vehicle_length if length is None else length)
        self.vehicles[veh.id] = veh
        self.next_id += 1
        self.spawned += 1
        return veh

    def remove(self, vid: int) -> Vehicle:
        veh = self.vehicles.pop(vid)
        veh.alive = False
        return veh

    def scratch_copy(self) -> "SimState":
        """Copy of the vehicles with a throwaway RNG, for tentative what-if moves."""
        other = SimState(rng=np.random.default_rng(0), time_step=self.time_step,
                         next_id=self.next_id, vehicle_length=self.vehicle_length)
        other.vehicles = {vid: v.copy() for vid, v in self.vehicles.items()}
        return other

    def counters(self) -> dict[str, int]:
        return {
            "spawned": self.spawned,
            "alive": len(self.vehicles),
            "merged_ok": self.merged_ok,
            "merged_fail": self.merged_fail,
            "reached_end": self.reached_end,
            "collision_pairs": self.collision_pairs,
            "collided": self.collided,
        }


@dataclass
class StepEvents:
    lane_changes: list[tuple[int, int, int]] = field(default_factory=list)  # (id, from, to)
    cav_lane_changes: int = 0
    boundary_clamped: int = 0
    rejected: list[int] = field(default_factory=list)
    collisions: list[tuple[int, int]] = field(default_factory=list)
    merged_out: list[tuple[int, int]] = field(default_factory=list)  # (id, ramp index)
    missed_ramp: list[tuple[int, int]] = field(default_factory=list)
    reached_end: list[int] = field(default_factory=list)
    spawned: list[int] = field(default_factory=list)
    spawn_blocked: int = 0
    # final snapshot of every vehicle removed during the step
    removed: dict[int, Vehicle] = field(default_factory=dict)

    @property
    def lane_changes_executed(self) -> int:
        return len(self.lane_changes)

    @property
    def terminal_collision(self) -> bool:
        return bool(self.collisions)

    def to_record(self, time_step: int) -> dict:
        return {
            "step": time_step,
            "lane_changes": [list(x) for x in self.lane_changes],
            "cav_lane_changes": self.cav_lane_changes,
            "boundary_clamped": self.boundary_clamped,
            "rejected": list(self.rejected),
            "collisions": [list(x) for x in self.collisions],
            "merged_out": [list(x) for x in self.merged_out],
            "missed_ramp": [list(x) for x in self.missed_ramp],
            "reached_end": list(self.reached_end),
            "spawned": list(self.spawned),
            "spawn_blocked": self.spawn_blocked,
        }


def idm_accel(v: float, v0: float, gap: float, dv: float, p: IdmParams) -> float:
    """IDM acceleration for speed ``v`` behind a leader at bumper gap ``gap``.

    ``dv`` is the closing speed (own speed minus leader speed). Pass
    ``NO_LEADER_GAP`` when there is no leader. A non-positive gap returns the
    emergency deceleration instead of failing.
    """
    if gap <= 0.0:
        return -p.emergency_decel
    dynamic = v * p.headway_time + v * dv / (2.0 * math.sqrt(p.max_accel * p.comfortable_decel))
    s_star = p.min_gap + max(0.0, dynamic)
    acc = p.max_accel * (1.0 - (v / v0) ** p.accel_exponent - (s_star / gap) ** 2)
    return max(acc, -p.emergency_decel)


def _desired_speed(veh: Vehicle, road: RoadSpec, p: IdmParams) -> float:
    return p.desired_speed if p.desired_speed is not None else road.speed_limit(veh.kind)


def _lanes(state: SimState, lane_count: int) -> list[list[Vehicle]]:
    lanes: list[list[Vehicle]] = [[] for _ in range(lane_count)]
    for v in state.vehicles.values():
        lanes[v.lane].append(v)
    for lane in lanes:
        lane.sort(key=lambda v: (v.position, v.id))
    return lanes


def _neighbors(lane: list[Vehicle], ego: Vehicle) -> tuple[Vehicle | None, Vehicle | None]:
    """(leader, follower) of ``ego`` among the vehicles of one lane, ego excluded."""
    leader = follower = None
    for v in lane:
        if v.id == ego.id:
            continue
        if v.position > ego.position or (v.position == ego.position and v.id > ego.id):
            if leader is None:
                leader = v
        else:
            follower = v
    return leader, follower


def _accel_behind(veh: Vehicle, leader: Vehicle | None, road: RoadSpec, idm: IdmSpec) -> float:
    p = _idm_for(idm, veh.kind)
    v0 = _desired_speed(veh, road, p)
    if leader is None:
        return idm_accel(veh.speed, v0, NO_LEADER_GAP, 0.0, p)
    gap = leader.rear - veh.position
    return idm_accel(veh.speed, v0, gap, veh.speed - leader.speed, p)


def lane_change_is_safe(state: SimState, veh: Vehicle, target_lane: int, road: RoadSpec,
                        idm: IdmSpec, lanes: list[list[Vehicle]] | None = None) -> bool:
    """Safety gate: leader gap >= s0 and the new follower brakes no harder than b."""
    if lanes is None:
        lanes = _lanes(state, road.lane_count)
    p = _idm_for(idm, veh.kind)
    leader, follower = _neighbors(lanes[target_lane], veh)
    if leader is not None and leader.rear - veh.position < p.min_gap:
        return False
    if follower is not None:
        pf = _idm_for(idm, follower.kind)
        if _accel_behind(follower, veh, road, idm) < -pf.comfortable_decel:
            return False
    return True


def hdv_lane_policy(state: SimState, vehicle_id: int, road: RoadSpec,
                    idm: IdmSpec = IdmParams(), hysteresis: float = 0.2,
                    lanes: list[list[Vehicle]] | None = None) -> Command:
    """Incentive-plus-safety lane choice for a human-driven vehicle.

    A neighbouring lane is chosen when the safety gate holds and the IDM
    acceleration there beats the current one by more than ``hysteresis``.
    Among two qualifying lanes the larger gain wins, ties going right.
    """
    veh = state.vehicles[vehicle_id]
    if lanes is None:
        lanes = _lanes(state, road.lane_count)
    current_leader, _ = _neighbors(lanes[veh.lane], veh)
    a_here = _accel_behind(veh, current_leader, road, idm)

    best, best_gain = Command.KEEP, hysteresis
    for cmd, target in ((Command.RIGHT, veh.lane - 1), (Command.LEFT, veh.lane + 1)):
        if not 0 <= target < road.lane_count:
            continue
        if not lane_change_is_safe(state, veh, target, road, idm, lanes):
            continue
        leader, _ = _neighbors(lanes[target], veh)
        gain = _accel_behind(veh, leader, road, idm) - a_here
        if gain > best_gain:
            best, best_gain = cmd, gain
    return best


def apply_lane_changes(state: SimState, commands: Mapping[int, Command | int], road: RoadSpec,
                       events: StepEvents | None = None) -> StepEvents:
    """Execute lane-change commands as instantaneous lateral moves.

    Commands pointing off the road are clamped to Keep and counted in
    ``boundary_clamped``. Unknown or dead ids are rejected with a warning.
    """
    if events is None:
        events = StepEvents()
    for vid, cmd in commands.items():
        veh = state.vehicles.get(vid)
        if veh is None or not veh.alive:
            LOG.warning("lane-change command for unknown or dead vehicle %s rejected", vid)
            events.rejected.append(vid)
            continue
        cmd = Command(cmd)
        if cmd == Command.KEEP:
            continue
        target = veh.lane + (1 if cmd == Command.LEFT else -1)
        if not 0 <= target < road.lane_count:
            events.boundary_clamped += 1
            continue
        events.lane_changes.append((vid, veh.lane, target))
        if veh.kind == Kind.CAV:
            events.cav_lane_changes += 1
        veh.lane = target
    return events


def detect_collisions(state: SimState, lane_count: int | None = None) -> list[tuple[int, int]]:
    """All same-lane pairs with negative bumper gap, as (rear id, front id)."""
    if lane_count is None:
        lane_count = 1 + max((v.lane for v in state.vehicles.values()), default=0)
    pairs = []
    for lane in _lanes(state, lane_count):
        for i, rear in enumerate(lane):
            for front in lane[i + 1:]:
                if front.rear - rear.position >= 0.0:
                    break
                pairs.append((rear.id, front.id))
    pairs.sort(key=lambda pr: (state.vehicles[pr[0]].position, state.vehicles[pr[1]].position))
    return pairs


def _remove_collided(state: SimState, pairs: list[tuple[int, int]], events: StepEvents) -> None:
    for pair in pairs:
        events.collisions.append(pair)
        state.collision_pairs += 1
        for vid in pair:
            if vid in state.vehicles:
                events.removed[vid] = state.remove(vid).copy()
                state.collided += 1


def process_exits(state: SimState, road: RoadSpec, events: StepEvents | None = None) -> StepEvents:
    """Remove vehicles that merged out at their ramp or reached the corridor end."""
    if events is None:
        events = StepEvents()
    for veh in list(state.vehicles.values()):
        if veh.position >= road.corridor_length:
            if veh.target_ramp is not None:
                state.merged_fail += 1
            else:
                state.reached_end += 1
            events.reached_end.append(veh.id)
            events.removed[veh.id] = state.remove(veh.id).copy()
            continue
        ramp = veh.target_ramp
        if ramp is None or veh.missed_ramp:
            continue
        ramp_x = road.ramp_positions[ramp]
        if veh.lane == 0 and ramp_x - road.merge_window <= veh.position <= ramp_x:
            state.merged_ok += 1
            events.merged_out.append((veh.id, ramp))
            events.removed[veh.id] = state.remove(veh.id).copy()
        elif veh.position > ramp_x:
            veh.missed_ramp = True
            events.missed_ramp.append((veh.id, ramp))
    return events


_SPAWN_CLASSES = (
    ("hdv", Kind.HDV, Intention.UNOBSERVED),
    ("cav_ramp1", Kind.CAV, Intention.RAMP1),
    ("cav_ramp2", Kind.CAV, Intention.RAMP2),
)


def spawn_step(state: SimState, flows: Flows, road: RoadSpec, dt: float = 0.5,
               idm: IdmSpec = IdmParams(), events: StepEvents | None = None) -> StepEvents:
    """Bernoulli arrivals at the corridor entry, one draw per class per step.

    Lane, speed and the arrival coin are always drawn so the random stream
    does not depend on occupancy. A spawn is dropped when the entry cell is
    occupied or when the new vehicle would have to brake harder than its
    comfortable deceleration behind the first vehicle ahead.
    """
    if events is None:
        events = StepEvents()
    for attr, kind, intention in _SPAWN_CLASSES:
        coin, lane_draw, speed_draw = state.rng.random(3)
        if coin >= getattr(flows, attr) * dt:
            continue
        lane = min(int(lane_draw * road.lane_count), road.lane_count - 1)
        speed = (0.5 + 0.5 * speed_draw) * road.speed_limit(kind)
        p = _idm_for(idm, kind)
        length = state.vehicle_length
        ahead = [v for v in state.vehicles.values() if v.lane == lane]
        if any(v.position < p.min_gap + length for v in ahead):
            events.spawn_blocked += 1
            continue
        leader = min(ahead, key=lambda v: (v.position, v.id), default=None)
        probe = Vehicle(-1, kind, intention, lane, 0.0, speed, length)
        if leader is not None and _accel_behind(probe, leader, road, idm) < -p.comfortable_decel:
            events.spawn_blocked += 1
            continue
        veh = state.add_vehicle(kind, intention, lane, 0.0, speed, length)
        events.spawned.append(veh.id)
    return events


def step(state: SimState, cav_commands: Mapping[int, Command | int], flows: Flows,
         road: RoadSpec, dt: float = 0.5, idm: IdmSpec = IdmParams(),
         hysteresis: float = 0.2) -> StepEvents:
    """Advance the simulation by one step of ``dt`` seconds, mutating ``state``.

    Order: CAV commands, HDV lane policy (one vehicle at a time, so HDVs see
    the CAV moves and never claim the same gap twice), collision removal, IDM
    accelerations, Euler update, collision removal, ramp/corridor exits,
    spawning.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    events = StepEvents()

    accepted = {}
    for vid, cmd in cav_commands.items():
        veh = state.vehicles.get(vid)
        if veh is not None and veh.kind != Kind.CAV:
            LOG.warning("external command for HDV %s rejected", vid)
            events.rejected.append(vid)
            continue
        accepted[vid] = cmd
    apply_lane_changes(state, accepted, road, events)

    for veh in state.alive():
        if veh.kind != Kind.HDV:
            continue
        cmd = hdv_lane_policy(state, veh.id, road, idm, hysteresis)
        if cmd != Command.KEEP:
            apply_lane_changes(state, {veh.id: cmd}, road, events)

    # a lateral move straight into an occupied stretch is a crash on the spot
    _remove_collided(state, detect_collisions(state, road.lane_count), events)

    lanes = _lanes(state, road.lane_count)
    accel = {}
    for lane in lanes:
        for i, veh in enumerate(lane):
            leader = lane[i + 1] if i + 1 < len(lane) else None
            accel[veh.id] = _accel_behind(veh, leader, road, idm)
    for veh in state.vehicles.values():
        veh.speed = max(0.0, veh.speed + accel[veh.id] * dt)
        veh.position += veh.speed * dt

    _remove_collided(state, detect_collisions(state, road.lane_count), events)
    process_exits(state, road, events)
    spawn_step(state, flows, road, dt, idm, events)
    state.time_step += 1
    return events


def check_conservation(state: SimState) -> bool:
    return state.spawned == (len(state.vehicles) + state.merged_ok + state.merged_fail
                             + state.reached_end + state.collided)


class TrajectoryRecorder:
    """Collects per-(step, vehicle) rows and per-step event records."""

    COLUMNS = ("step", "id", "kind", "intention", "lane", "position_m", "speed_mps", "event")

    def __init__(self):
        self.rows: list[tuple] = []
        self.event_records: list[dict] = []

    def record(self, state: SimState, events: StepEvents) -> None:
        tags: dict[int, str] = {}
        for vid, _, _ in events.lane_changes:
            tags[vid] = "lane_change"
        for vid in events.spawned:
            tags[vid] = "spawn"
        for vid, _ in events.missed_ramp:
            tags[vid] = "missed_ramp"
        for pair in events.collisions:
            for vid in pair:
                tags[vid] = "collision"
        for vid, _ in events.merged_out:
            tags[vid] = "merged"
        for vid in events.reached_end:
            tags[vid] = "reached_end"
        snapshot = {**{v.id: v for v in state.vehicles.values()}, **events.removed}
        for vid in sorted(snapshot):
            v = snapshot[vid]
            self.rows.append((state.time_step, v.id, v.kind.name, v.intention.name, v.lane,
                              round(v.position, 6), round(v.speed, 6), tags.get(vid, "")))
        self.event_records.append(events.to_record(state.time_step))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.COLUMNS)
            writer.writerows(self.rows)

    def write_events(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.event_records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def run_hdv_only(seed: int, steps: int, flow: float, road: RoadSpec = RoadSpec(),
                 dt: float = 0.5, idm: IdmSpec = IdmParams()) -> SimState:
    """Background traffic only; handy for checking the HDV model in isolation."""
    state = SimState.new(seed)
    flows = Flows(hdv=flow, cav_ramp1=0.0, cav_ramp2=0.0)
    for _ in range(steps):
        step(state, {}, flows, road, dt, idm)
    return state


def iter_alive(state: SimState, kind: Kind | None = None) -> Iterable[Vehicle]:
    for v in state.vehicles.values():
        if kind is None or v.kind == kind:
            yield v
