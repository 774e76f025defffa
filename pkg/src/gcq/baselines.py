"""Reference CAV controllers: rule-based lane changing, uniform random, and the trained network."""

from __future__ import annotations

import numpy as np

from .model import N_ACTIONS, GCQNetwork, select_actions
from .observation import ObservationTensor
from .sim import (Command, IdmParams, IdmSpec, Kind, RoadSpec, SimState, apply_lane_changes,
                  hdv_lane_policy, lane_change_is_safe)


def rule_based_policy(state: SimState, road: RoadSpec, idm: IdmSpec = IdmParams(),
                      mandatory_distance: float = 100.0, hysteresis: float = 0.2) -> dict[int, Command]:
    """Human-like lane changing for every CAV, plus a forced move right near the exit.

    Within ``mandatory_distance`` upstream of its ramp a CAV asks for Right
    whenever the safety gate allows and otherwise waits in its lane. CAVs
    are decided in id order on a scratch copy, each seeing the earlier moves.
    """
    scratch = state.scratch_copy()
    commands: dict[int, Command] = {}
    for veh in list(scratch.vehicles.values()):
        if veh.kind != Kind.CAV:
            continue
        ramp = veh.target_ramp
        cmd = None
        if ramp is not None and not veh.missed_ramp:
            to_ramp = road.ramp_positions[ramp] - veh.position
            if 0.0 <= to_ramp <= mandatory_distance:
                if veh.lane > 0 and lane_change_is_safe(scratch, veh, veh.lane - 1, road, idm):
                    cmd = Command.RIGHT
                else:
                    cmd = Command.KEEP
        if cmd is None:
            cmd = hdv_lane_policy(scratch, veh.id, road, idm, hysteresis)
        commands[veh.id] = cmd
        if cmd != Command.KEEP:
            apply_lane_changes(scratch, {veh.id: cmd}, road)
    return commands


class RuleBasedPolicy:
    name = "rule_based"

    def __init__(self, mandatory_distance: float = 100.0):
        self.mandatory_distance = mandatory_distance

    def act(self, env, obs: ObservationTensor, rng: np.random.Generator) -> dict[int, Command]:
        c = env.config
        return rule_based_policy(env.state, env.road, env.idm, self.mandatory_distance, c.hysteresis)


class RandomPolicy:
    """Uniform random command for every CAV slot, every step."""

    name = "random"

    def act(self, env, obs: ObservationTensor, rng: np.random.Generator) -> dict[int, Command]:
        return select_actions(np.zeros((obs.n_max, N_ACTIONS)), obs, 1.0, rng)


class GreedyQPolicy:
    name = "gcq"

    def __init__(self, net: GCQNetwork, epsilon: float = 0.0):
        self.net = net
        self.epsilon = epsilon

    def act(self, env, obs: ObservationTensor, rng: np.random.Generator) -> dict[int, Command]:
        return select_actions(self.net.forward_obs(obs), obs, self.epsilon, rng)
