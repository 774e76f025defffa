"""Graph observation (X, A, M) built from the simulator state.

Rows are the visible vehicles in ascending id order: every CAV plus every HDV
that at least one CAV senses. Everything is zero-padded to a fixed slot
capacity so that batches have static shapes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sim import Intention, Kind, RoadSpec, SimState

FEATURE_DIM = 8
PAD_ID = -1


class CapacityError(RuntimeError):
    """More visible vehicles than observation slots."""


@dataclass
class ObservationTensor:
    X: np.ndarray  # (n_max, F) float64
    A: np.ndarray  # (n_max, n_max) float64, binary, symmetric, zero diagonal
    M: np.ndarray  # (n_max,) float64 CAV mask
    slot_ids: np.ndarray  # (n_max,) int64, PAD_ID for padding
    n_real: int

    @property
    def n_max(self) -> int:
        return self.X.shape[0]

    def cav_slots(self) -> np.ndarray:
        return np.flatnonzero(self.M > 0)

    def to_json(self) -> dict:
        n = self.n_real
        return {
            "n_real": n,
            "n_max": self.n_max,
            "slot_ids": self.slot_ids[:n].tolist(),
            "X": self.X[:n].tolist(),
            "A": self.A[:n, :n].astype(int).tolist(),
            "M": self.M[:n].astype(int).tolist(),
        }


def sense_neighbors(state: SimState, cav_id: int, sensing_range: float) -> set[int]:
    ego = state.vehicles[cav_id]
    return {
        v.id for v in state.vehicles.values()
        if v.kind == Kind.HDV and abs(v.position - ego.position) <= sensing_range
    }


def _sensing(state: SimState, sensing_range: float) -> dict[int, set[int]]:
    cavs = [v for v in state.vehicles.values() if v.kind == Kind.CAV]
    hdvs = [v for v in state.vehicles.values() if v.kind == Kind.HDV]
    if not cavs or not hdvs:
        return {c.id: set() for c in cavs}
    cpos = np.array([c.position for c in cavs])
    hpos = np.array([h.position for h in hdvs])
    hids = np.array([h.id for h in hdvs])
    near = np.abs(cpos[:, None] - hpos[None, :]) <= sensing_range
    return {c.id: set(hids[near[i]].tolist()) for i, c in enumerate(cavs)}


def visible_ids(state: SimState, sensing_range: float) -> list[int]:
    sensed = _sensing(state, sensing_range)
    seen = set(sensed)
    for hs in sensed.values():
        seen |= hs
    return sorted(seen)


def node_features(vehicle, road: RoadSpec) -> np.ndarray:
    x = np.zeros(FEATURE_DIM)
    x[0] = vehicle.speed / road.speed_limit_cav
    x[1] = vehicle.position / road.corridor_length
    # lane one-hot: bottom, middle, top; extra lanes fold into the middle block
    if vehicle.lane == 0:
        x[2] = 1.0
    elif vehicle.lane == road.top_lane:
        x[4] = 1.0
    else:
        x[3] = 1.0
    if vehicle.intention != Intention.UNOBSERVED:
        x[5 + int(vehicle.intention)] = 1.0
    return x


def build_features(state: SimState, road: RoadSpec, sensing_range: float = 30.0):
    """Feature rows, their vehicle ids and the CAV mask for the visible vehicles."""
    ids = visible_ids(state, sensing_range)
    X = np.zeros((len(ids), FEATURE_DIM))
    M = np.zeros(len(ids))
    for row, vid in enumerate(ids):
        veh = state.vehicles[vid]
        X[row] = node_features(veh, road)
        M[row] = 1.0 if veh.kind == Kind.CAV else 0.0
    return X, np.array(ids, dtype=np.int64), M


def build_adjacency(state: SimState, ids, sensing_range: float = 30.0) -> np.ndarray:
    """Three-step wiring: CAV to sensed HDVs, CAV clique, co-sensed HDV cliques."""
    ids = list(ids)
    index = {vid: i for i, vid in enumerate(ids)}
    n = len(ids)
    A = np.zeros((n, n))
    sensed = _sensing(state, sensing_range)
    cav_rows = [index[c] for c in sensed if c in index]
    for cid, hdvs in sensed.items():
        if cid not in index:
            continue
        c = index[cid]
        rows = [index[h] for h in hdvs if h in index]
        A[c, rows] = 1.0
        A[np.ix_(rows, rows)] = 1.0
    A[np.ix_(cav_rows, cav_rows)] = 1.0
    A = np.maximum(A, A.T)
    np.fill_diagonal(A, 0.0)
    return A


def pad(X: np.ndarray, A: np.ndarray, M: np.ndarray, slot_ids, n_max: int) -> ObservationTensor:
    n = X.shape[0]
    if n > n_max:
        raise CapacityError(f"{n} visible vehicles exceed the configured N_max={n_max}")
    Xp = np.zeros((n_max, X.shape[1] if X.ndim == 2 and X.shape[1] else FEATURE_DIM))
    Ap = np.zeros((n_max, n_max))
    Mp = np.zeros(n_max)
    ids = np.full(n_max, PAD_ID, dtype=np.int64)
    Xp[:n] = X
    Ap[:n, :n] = A
    Mp[:n] = M
    ids[:n] = slot_ids
    return ObservationTensor(Xp, Ap, Mp, ids, n)


def normalize_adjacency(A: np.ndarray) -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2 over the last two axes (batched input allowed)."""
    n = A.shape[-1]
    A_hat = A + np.eye(n)
    d = 1.0 / np.sqrt(A_hat.sum(axis=-1))
    return d[..., :, None] * A_hat * d[..., None, :]


def observe(state: SimState, road: RoadSpec, sensing_range: float = 30.0, n_max: int = 40,
            no_fusion: bool = False) -> ObservationTensor:
    """Full padded observation; ``no_fusion`` drops every edge (identity after normalization)."""
    X, ids, M = build_features(state, road, sensing_range)
    if no_fusion:
        A = np.zeros((len(ids), len(ids)))
    else:
        A = build_adjacency(state, ids, sensing_range)
    return pad(X, A, M, ids, n_max)
