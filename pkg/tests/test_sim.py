import math

import numpy as np
import pytest

from gcq.sim import (NO_LEADER_GAP, SPEED_SLACK, Command, Flows, IdmParams, Intention, Kind,
                     RoadSpec, SimState, StepEvents, TrajectoryRecorder, apply_lane_changes,
                     check_conservation, detect_collisions, hdv_lane_policy, idm_accel,
                     process_exits, run_hdv_only, spawn_step, step)

ROAD = RoadSpec()
P = IdmParams()
NO_FLOW = Flows(0.0, 0.0, 0.0)


def scene(*vehicles, seed=0):
    """Build a state from (kind, intention, lane, position, speed) tuples."""
    st = SimState.new(seed)
    for kind, intention, lane, pos, speed in vehicles:
        st.add_vehicle(kind, intention, lane, pos, speed)
    return st


def hdv(lane, pos, speed=8.0):
    return (Kind.HDV, Intention.UNOBSERVED, lane, pos, speed)


def cav(lane, pos, speed=8.0, intention=Intention.THROUGH):
    return (Kind.CAV, intention, lane, pos, speed)


def idm_by_hand(v, v0, gap, dv, a=1.0, b=1.5, s0=2.0, T=1.5, delta=4.0):
    s_star = s0 + v * T + v * dv / (2 * math.sqrt(a * b))
    return a * (1 - (v / v0) ** delta - (s_star / gap) ** 2)


# --- road ------------------------------------------------------------------------------------

def test_road_segments_partition_the_corridor():
    assert ROAD.segment_bounds == ((0, 200), (200, 400), (400, 500))
    assert (ROAD.L1, ROAD.L2) == (200, 200)
    assert [ROAD.segment_of(x) for x in (0, 199.9, 200, 399.9, 400, 499.9, 500)] == [0, 0, 1, 1, 2, 2, 2]
    assert ROAD.top_lane == 2


@pytest.mark.parametrize("kwargs", [
    {"lane_count": 1},
    {"ramp_positions": (300.0, 200.0)},
    {"ramp_positions": (200.0, 500.0)},
    {"ramp_positions": (0.0, 200.0)},
    {"speed_limit_cav": 0.0},
])
def test_road_rejects_bad_geometry(kwargs):
    with pytest.raises(ValueError):
        RoadSpec(**kwargs)


def test_idm_params_must_be_positive():
    with pytest.raises(ValueError):
        IdmParams(min_gap=0.0)


# --- IDM -------------------------------------------------------------------------------------

def test_idm_free_road_at_desired_speed_is_zero():
    # only the interaction term with the sentinel gap remains: -(s*/1e4)^2 with s* = 2 + 14*1.5
    acc = idm_accel(14, 14, NO_LEADER_GAP, 0, P)
    assert abs(acc - (-((2 + 21) / 1e4) ** 2)) < 1e-6
    assert abs(acc) < 1e-5


def test_idm_standstill_free_road_is_max_accel():
    assert idm_accel(0, 14, NO_LEADER_GAP, 0, P) == pytest.approx(1.0 * (1 - (2 / 1e4) ** 2))


def test_idm_reference_value():
    assert idm_accel(10, 14, 30, 0, P) == pytest.approx(0.4186, abs=1e-3)


@pytest.mark.parametrize("v,gap,dv", [(5, 12, 2), (12, 40, -3), (3, 8, 0), (13.9, 60, 4)])
def test_idm_matches_hand_formula(v, gap, dv):
    expected = max(idm_by_hand(v, 14, gap, dv), -6.0)
    assert idm_accel(v, 14, gap, dv, P) == pytest.approx(expected, rel=1e-12)


def test_idm_non_positive_gap_brakes_hard():
    assert idm_accel(10, 14, 0.0, 0, P) == -6.0
    assert idm_accel(10, 14, -3.0, 0, P) == -6.0


def test_idm_clamped_at_emergency_decel():
    assert idm_accel(14, 14, 0.5, 10, P) == -6.0


# --- spawning --------------------------------------------------------------------------------

def test_zero_flow_spawns_nothing():
    st = SimState.new(3)
    for _ in range(100):
        spawn_step(st, NO_FLOW, ROAD)
    assert st.vehicles == {} and st.spawned == 0


def test_spawn_rate_matches_flow_times_dt():
    st = SimState.new(11)
    flows = Flows(hdv=0.1, cav_ramp1=0.0, cav_ramp2=0.0)
    hits = 0
    for _ in range(20_000):
        ev = spawn_step(st, flows, ROAD, dt=0.5)
        hits += len(ev.spawned) + ev.spawn_blocked
        st.vehicles.clear()  # keep the entry free so every success spawns
    # Bernoulli(0.05): 20k trials, sd ~ 30.8
    assert abs(hits - 1000) < 5 * math.sqrt(20_000 * 0.05 * 0.95)


def test_spawned_vehicle_attributes():
    st = SimState.new(5)
    flows = Flows(hdv=2.0, cav_ramp1=2.0, cav_ramp2=2.0)  # probability 1 per step
    ev = spawn_step(st, flows, ROAD, dt=0.5)
    assert ev.spawned
    for vid in ev.spawned:
        v = st.vehicles[vid]
        assert v.position == 0.0
        assert 0 <= v.lane < 3
        limit = ROAD.speed_limit(v.kind)
        assert 0.5 * limit <= v.speed <= limit
        assert (v.intention == Intention.UNOBSERVED) == (v.kind == Kind.HDV)


def test_blocked_entry_cell_skips_spawn():
    st = scene(hdv(0, 3.0), hdv(1, 3.0), hdv(2, 3.0))
    ev = spawn_step(st, Flows(hdv=2.0, cav_ramp1=0, cav_ramp2=0), ROAD, dt=0.5)
    assert ev.spawned == [] and ev.spawn_blocked == 1
    assert st.spawned == 3


def test_spawn_consumes_randomness_independently_of_occupancy():
    a, b = SimState.new(9), SimState.new(9)
    b.add_vehicle(Kind.HDV, Intention.UNOBSERVED, 0, 3.0, 5.0)
    for _ in range(10):
        spawn_step(a, Flows(), ROAD)
        spawn_step(b, Flows(), ROAD)
    assert a.rng.random() == b.rng.random()


# --- HDV lane policy -------------------------------------------------------------------------

def test_hdv_keeps_lane_on_empty_road():
    for lane in range(3):
        st = scene(hdv(lane, 100.0))
        assert hdv_lane_policy(st, 0, ROAD) == Command.KEEP


def test_hdv_leaves_blocked_lane():
    st = scene(hdv(0, 100.0, 8.0), hdv(0, 110.0, 0.0))
    assert hdv_lane_policy(st, 0, ROAD) == Command.LEFT


def test_hdv_safety_gate_blocks_move():
    # stalled leader ahead, but a fast follower 3 m behind in the only other lane
    st = scene(hdv(0, 100.0, 8.0), hdv(0, 110.0, 0.0), hdv(1, 92.0, 10.0))
    assert hdv_lane_policy(st, 0, ROAD) == Command.KEEP


def test_hdv_only_traffic_never_collides():
    for seed in range(10):
        st = run_hdv_only(seed, 600, 0.2)
        assert st.collision_pairs == 0
        assert st.spawned > 0
        assert check_conservation(st)


# --- lane changes ----------------------------------------------------------------------------

def test_left_off_top_lane_is_clamped():
    st = scene(cav(2, 50.0))
    ev = apply_lane_changes(st, {0: Command.LEFT}, ROAD)
    assert st.vehicles[0].lane == 2
    assert ev.boundary_clamped == 1 and ev.lane_changes_executed == 0 and ev.cav_lane_changes == 0


def test_right_moves_down_one_lane():
    st = scene(cav(1, 50.0))
    ev = apply_lane_changes(st, {0: Command.RIGHT}, ROAD)
    assert st.vehicles[0].lane == 0
    assert ev.lane_changes == [(0, 1, 0)] and ev.cav_lane_changes == 1


def test_all_keep_is_identity():
    st = scene(cav(0, 50.0), cav(1, 80.0), cav(2, 120.0))
    ev = apply_lane_changes(st, {0: Command.KEEP, 1: Command.KEEP, 2: Command.KEEP}, ROAD)
    assert [v.lane for v in st.vehicles.values()] == [0, 1, 2]
    assert ev.lane_changes_executed == 0 and ev.boundary_clamped == 0


def test_command_for_unknown_vehicle_is_rejected():
    st = scene(cav(1, 50.0))
    ev = apply_lane_changes(st, {42: Command.LEFT, 0: Command.LEFT}, ROAD)
    assert ev.rejected == [42]
    assert st.vehicles[0].lane == 2


def test_cav_lane_change_has_no_safety_check():
    st = scene(cav(1, 100.0), hdv(0, 102.0, 8.0))
    ev = step(st, {0: Command.RIGHT}, NO_FLOW, ROAD)
    assert len(ev.collisions) == 1
    assert st.vehicles == {}


def test_external_command_for_hdv_is_rejected():
    st = scene(hdv(1, 100.0))
    ev = step(st, {0: Command.RIGHT}, NO_FLOW, ROAD)
    assert ev.rejected == [0]
    assert st.vehicles[0].lane == 1


# --- collisions ------------------------------------------------------------------------------

def test_overlap_is_collision():
    st = scene(hdv(0, 100.0), hdv(0, 104.0))
    assert detect_collisions(st) == [(0, 1)]


def test_different_lanes_never_collide():
    st = scene(hdv(0, 100.0), hdv(1, 100.0))
    assert detect_collisions(st) == []


def test_positive_gap_is_not_collision():
    st = scene(hdv(0, 100.0), hdv(0, 106.0))
    assert detect_collisions(st) == []


def test_collision_pairs_ordered_by_position():
    st = scene(hdv(1, 300.0), hdv(1, 302.0), hdv(0, 100.0), hdv(0, 103.0))
    assert detect_collisions(st) == [(2, 3), (0, 1)]


# --- exits -----------------------------------------------------------------------------------

def test_ramp_cav_in_window_merges_out():
    st = scene(cav(0, 195.0, intention=Intention.RAMP1))
    ev = process_exits(st, ROAD)
    assert ev.merged_out == [(0, 0)] and st.merged_ok == 1 and st.vehicles == {}


def test_ramp_cav_on_wrong_lane_misses_and_continues():
    st = scene(cav(1, 199.0, intention=Intention.RAMP1))
    step(st, {}, NO_FLOW, ROAD)
    assert st.vehicles[0].position > 200
    ev = process_exits(st, ROAD)
    assert ev.missed_ramp == []  # logged once, during the step that crossed
    assert st.vehicles[0].missed_ramp
    st.vehicles[0].position = 501.0
    ev = process_exits(st, ROAD)
    assert ev.reached_end == [0] and st.merged_fail == 1


def test_missed_ramp_logged_exactly_once():
    st = scene(cav(1, 198.0, 10.0, intention=Intention.RAMP1))
    logged = []
    for _ in range(5):
        logged += step(st, {}, NO_FLOW, ROAD).missed_ramp
    assert logged == [(0, 0)]


def test_vehicle_past_corridor_end_is_removed():
    st = scene(hdv(2, 501.0))
    ev = process_exits(st, ROAD)
    assert ev.reached_end == [0] and st.reached_end == 1


def test_ramp2_cav_ignores_first_ramp():
    st = scene(cav(0, 195.0, intention=Intention.RAMP2))
    assert process_exits(st, ROAD).merged_out == []


# --- full step -------------------------------------------------------------------------------

def test_empty_step_only_advances_time():
    st = SimState.new(0)
    ev = step(st, {}, NO_FLOW, ROAD)
    assert st.time_step == 1 and st.vehicles == {}
    assert ev.to_record(1)["collisions"] == []


def test_free_vehicle_at_desired_speed_cruises():
    st = scene(hdv(1, 100.0, 10.0))
    step(st, {}, NO_FLOW, ROAD, dt=0.5)
    v = st.vehicles[0]
    assert v.position == pytest.approx(105.0, abs=1e-3)
    assert v.speed == pytest.approx(10.0, abs=1e-3)


def test_euler_update_uses_new_speed():
    st = scene(hdv(1, 100.0, 0.0))
    step(st, {}, NO_FLOW, ROAD, dt=0.5)
    v = st.vehicles[0]
    a = idm_accel(0.0, 10.0, NO_LEADER_GAP, 0.0, P)
    assert v.speed == pytest.approx(0.5 * a) and v.position == pytest.approx(100.0 + 0.25 * a)


def test_non_positive_dt_rejected():
    with pytest.raises(ValueError):
        step(SimState.new(0), {}, NO_FLOW, ROAD, dt=0.0)


def _episode_log(seed, steps=300):
    st = SimState.new(seed)
    rng = np.random.default_rng(seed)
    log = []
    for _ in range(steps):
        cmds = {v.id: Command(int(rng.integers(3))) for v in st.alive() if v.kind == Kind.CAV
                and rng.random() < 0.05}
        ev = step(st, cmds, Flows(), ROAD)
        log.append(ev.to_record(st.time_step))
        log.append(sorted((v.id, v.lane, v.position, v.speed) for v in st.alive()))
    return log, st.counters()


def test_same_seed_replays_identically():
    assert _episode_log(4) == _episode_log(4)


def test_invariants_hold_along_random_episodes():
    for seed in range(3):
        st = SimState.new(seed)
        rng = np.random.default_rng(100 + seed)
        prev_speed = {}
        for _ in range(400):
            cmds = {v.id: Command(int(rng.integers(3))) for v in st.alive()
                    if v.kind == Kind.CAV and rng.random() < 0.1}
            ev = step(st, cmds, Flows(hdv=0.4), ROAD)
            terminal = [vid for pr in ev.collisions for vid in pr]
            terminal += [vid for vid, _ in ev.merged_out] + list(ev.reached_end)
            assert len(terminal) == len(set(terminal))
            assert check_conservation(st)
            for v in st.alive():
                assert 0 <= v.lane < ROAD.lane_count
                assert 0.0 <= v.position <= ROAD.corridor_length
                assert 0.0 <= v.speed <= ROAD.speed_limit(v.kind) + SPEED_SLACK
                if v.id in prev_speed:
                    assert abs(v.speed - prev_speed[v.id]) <= 6.0 * 0.5 + 1e-12
                assert (v.intention == Intention.UNOBSERVED) == (v.kind == Kind.HDV)
            prev_speed = {v.id: v.speed for v in st.alive()}
            assert detect_collisions(st, ROAD.lane_count) == []
            ids = list(st.vehicles)
            assert ids == sorted(ids)


def test_trajectory_export(tmp_path):
    st = SimState.new(1)
    rec = TrajectoryRecorder()
    for _ in range(50):
        rec.record(st, step(st, {}, Flows(hdv=0.5), ROAD))
    rec.write_csv(tmp_path / "t.csv")
    rec.write_events(tmp_path / "e.jsonl")
    header = (tmp_path / "t.csv").read_text().splitlines()[0]
    assert header == "step,id,kind,intention,lane,position_m,speed_mps,event"
    assert len((tmp_path / "e.jsonl").read_text().splitlines()) == 50
    assert isinstance(StepEvents().to_record(0), dict)
