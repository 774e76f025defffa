"""The graph-convolution Q network: encoder, one graph convolution, CAV mask, Q head."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .nn import Dense, GraphConv, gradcheck, masked_mse
from .observation import FEATURE_DIM, ObservationTensor, normalize_adjacency
from .sim import Command

N_ACTIONS = 3
HIDDEN = 32
HEAD_WIDTHS = (32, 32, 16)


class GCQNetwork:
    """Shared per-node Q network applied to padded graph observations.

    Inputs may be a single observation ``X (N, F)``, ``A (N, N)``, ``M (N,)``
    or a batch with a leading axis; the output has shape ``(..., N, 3)`` in
    the action order Left, Keep, Right.
    """

    def __init__(self, feature_dim: int = FEATURE_DIM, seed: int | np.random.Generator = 0,
                 hidden: int = HIDDEN, head_widths=HEAD_WIDTHS, n_actions: int = N_ACTIONS):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.feature_dim = feature_dim
        self.encoder = [
            Dense.init("encoder.0", rng, feature_dim, hidden),
            Dense.init("encoder.1", rng, hidden, hidden),
        ]
        self.gcn = GraphConv.init("gcn", rng, hidden, hidden)
        widths = (hidden, *head_widths)
        self.qhead = [
            Dense.init(f"qhead.{i}", rng, widths[i], widths[i + 1]) for i in range(len(head_widths))
        ]
        self.output = Dense.init("output", rng, widths[-1], n_actions, activation="linear")
        self._mask = None

    @property
    def layers(self):
        return [*self.encoder, self.gcn, *self.qhead, self.output]

    def parameters(self) -> "OrderedDict[str, np.ndarray]":
        """Live parameter arrays keyed ``<layer>.<W|b>``; in-place edits change the network."""
        out = OrderedDict()
        for layer in self.layers:
            for key, arr in layer.params().items():
                out[f"{layer.name}.{key}"] = arr
        return out

    def load(self, params) -> None:
        own = self.parameters()
        if list(own) != list(params):
            raise ValueError(f"parameter names differ: {list(params)} vs {list(own)}")
        for name, arr in params.items():
            if own[name].shape != np.shape(arr):
                raise ValueError(f"{name}: shape {np.shape(arr)} != {own[name].shape}")
            own[name][...] = arr

    def clone(self) -> "GCQNetwork":
        other = GCQNetwork(self.feature_dim, seed=0, hidden=self.gcn.W.shape[1],
                           head_widths=tuple(l.W.shape[1] for l in self.qhead),
                           n_actions=self.output.W.shape[1])
        other.load(self.parameters())
        return other

    def count_parameters(self) -> int:
        return int(sum(a.size for a in self.parameters().values()))

    def describe(self) -> list[tuple[str, tuple[int, ...], int]]:
        return [(name, arr.shape, arr.size) for name, arr in self.parameters().items()]

    def forward(self, X: np.ndarray, A: np.ndarray, M: np.ndarray, normalized: bool = False) -> np.ndarray:
        if X.shape[-1] != self.feature_dim:
            raise ValueError(f"feature width {X.shape[-1]} != {self.feature_dim}")
        if A.shape[-2:] != (X.shape[-2], X.shape[-2]) or M.shape != X.shape[:-1]:
            raise ValueError(f"shape mismatch X{X.shape} A{A.shape} M{M.shape}")
        A_norm = A if normalized else normalize_adjacency(A)
        h = X
        for layer in self.encoder:
            h = layer.forward(h)
        z = self.gcn.forward(h, A_norm)
        self._mask = M[..., None]
        h = z * self._mask
        for layer in self.qhead:
            h = layer.forward(h)
        return self.output.forward(h)

    def forward_obs(self, obs: ObservationTensor) -> np.ndarray:
        return self.forward(obs.X, obs.A, obs.M)

    def backward(self, dQ: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Gradients of a scalar loss given ``dQ = dL/dQ``; returns (param grads, dL/dX)."""
        g = self.output.backward(dQ)
        for layer in reversed(self.qhead):
            g = layer.backward(g)
        g = self.gcn.backward(g * self._mask)
        for layer in reversed(self.encoder):
            g = layer.backward(g)
        grads = OrderedDict()
        for layer in self.layers:
            for key, arr in layer.grads.items():
                grads[f"{layer.name}.{key}"] = arr
        return grads, g

    def relu_pattern(self) -> np.ndarray:
        parts = [layer.relu_pattern() for layer in self.layers]
        return np.concatenate([p.reshape(-1) for p in parts if p is not None])


def greedy_action(q_row: np.ndarray) -> Command:
    """Argmax with ties resolved toward Keep, then Left."""
    best = q_row.max()
    if q_row[Command.KEEP] == best:
        return Command.KEEP
    if q_row[Command.LEFT] == best:
        return Command.LEFT
    return Command.RIGHT


def select_actions(Q: np.ndarray, obs: ObservationTensor, epsilon: float,
                   rng: np.random.Generator) -> dict[int, Command]:
    """Per-CAV epsilon-greedy commands keyed by vehicle id.

    Two random numbers are drawn for every CAV slot whatever ``epsilon`` is,
    so the random stream stays aligned across policies.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must be in [0, 1], got {epsilon}")
    commands = {}
    for slot in obs.cav_slots():
        u = rng.random()
        random_action = Command(int(rng.integers(N_ACTIONS)))
        commands[int(obs.slot_ids[slot])] = random_action if u < epsilon else greedy_action(Q[slot])
    return commands


def random_problem(seed: int, n_nodes: int = 6, n_max: int | None = None):
    """A random small graph observation plus TD-style targets, for gradient checks."""
    rng = np.random.default_rng(seed)
    n_max = n_nodes if n_max is None else n_max
    X = np.zeros((n_max, FEATURE_DIM))
    X[:n_nodes, :2] = rng.uniform(0.05, 1.0, (n_nodes, 2))
    X[np.arange(n_nodes), 2 + rng.integers(0, 3, n_nodes)] = 1.0
    M = np.zeros(n_max)
    M[:n_nodes] = (rng.random(n_nodes) < 0.6).astype(float)
    M[0] = 1.0
    for i in np.flatnonzero(M):
        X[i, 5 + rng.integers(0, 3)] = 1.0
    A = np.zeros((n_max, n_max))
    upper = np.triu(rng.random((n_nodes, n_nodes)) < 0.5, 1)
    A[:n_nodes, :n_nodes] = upper | upper.T
    target = rng.normal(0.0, 1.0, (n_max, N_ACTIONS))
    sel = np.zeros((n_max, N_ACTIONS))
    sel[np.flatnonzero(M), rng.integers(0, N_ACTIONS, int(M.sum()))] = 1.0
    return X, A, M, target, sel


def gradcheck_problem(seed: int, n_nodes: int = 6, linear: bool = False):
    """Builder for ``nn.gradcheck``: a randomly initialised network on a random 6-node graph.

    Biases are drawn at random so that no unit sits exactly on a ReLU kink,
    and node features are kept at least 1e-3 away from zero.
    """
    rng = np.random.default_rng(10_000 + seed)
    net = GCQNetwork(seed=rng)
    for arr in net.parameters().values():
        if arr.ndim == 1:
            arr[...] = rng.normal(0.0, 0.1, arr.shape)
    if linear:
        for layer in net.encoder + net.qhead:
            layer.activation = "linear"
    X, A, M, target, sel = random_problem(seed, n_nodes)
    X = np.where(np.abs(X) < 1e-3, 1e-3, X)
    if linear:
        # the graph conv keeps its ReLU; lift its bias just enough to keep every unit on
        net.forward(X, A, M)
        z = net.gcn._cache[2]
        net.gcn.b[...] += 1.0 + max(0.0, -z.min())
        # small residuals keep the loss, and so its rounding noise, small
        target = net.forward(X, A, M) + 0.01 * rng.standard_normal(target.shape)
    params = net.parameters()

    def objective(need_grad: bool = True):
        Q = net.forward(X, A, M)
        loss, dQ = masked_mse(Q, target, sel)
        if not need_grad:
            return loss, None
        grads, _ = net.backward(dQ)
        return loss, grads

    return params, objective, net.relu_pattern


def gradcheck_max_error(seeds=range(20), h: float = 1e-5) -> float:
    """Worst relative error of ``nn.gradcheck`` over several random GCQ stacks."""
    return max(gradcheck(gradcheck_problem, seed, h=h) for seed in seeds)
