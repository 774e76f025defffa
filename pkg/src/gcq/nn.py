"""Small numpy neural-network core with hand-written reverse mode.

Layers cache what they need during ``forward`` and return the input gradient
from ``backward`` while storing parameter gradients in ``layer.grads``. All
arrays are float64 and may carry leading batch axes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from typing import Callable

import numpy as np


class NonFiniteError(FloatingPointError):
    pass


class NoForwardCacheError(RuntimeError):
    pass


def check_finite(name: str, arr: np.ndarray) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {name}")
    return arr


def he_init(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 2.0) -> np.ndarray:
    return rng.standard_normal((fan_in, fan_out)) * np.sqrt(gain / fan_in)


class Dense:
    def __init__(self, name: str, W: np.ndarray, b: np.ndarray, activation: str = "relu"):
        if activation not in ("relu", "linear"):
            raise ValueError(f"unknown activation {activation!r}")
        if W.ndim != 2 or b.shape != (W.shape[1],):
            raise ValueError(f"{name}: inconsistent shapes W{W.shape} b{b.shape}")
        self.name = name
        self.W = W
        self.b = b
        self.activation = activation
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    @classmethod
    def init(cls, name, rng, in_dim, out_dim, activation="relu"):
        gain = 2.0 if activation == "relu" else 1.0
        return cls(name, he_init(rng, in_dim, out_dim, gain), np.zeros(out_dim), activation)

    def params(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "b": self.b}

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.W.shape[0]:
            raise ValueError(f"{self.name}: input width {x.shape[-1]} != {self.W.shape[0]}")
        # one 2-D product over all leading axes is much faster than a broadcast matmul
        z = (x.reshape(-1, x.shape[-1]) @ self.W).reshape(*x.shape[:-1], -1) + self.b
        out = np.maximum(z, 0.0) if self.activation == "relu" else z
        self._cache = (x, z)
        return check_finite(self.name, out)

    def backward(self, g: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise NoForwardCacheError(f"{self.name}: backward called without a forward pass")
        x, z = self._cache
        if self.activation == "relu":
            g = g * (z > 0.0)
        x2 = x.reshape(-1, x.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        self.grads = {"W": x2.T @ g2, "b": g2.sum(axis=0)}
        return (g2 @ self.W.T).reshape(*g.shape[:-1], -1)

    def relu_pattern(self) -> np.ndarray | None:
        return None if self.activation != "relu" or self._cache is None else self._cache[1] > 0.0


class GraphConv:
    """relu(Anorm @ H @ W + b) with a precomputed normalized adjacency."""

    def __init__(self, name: str, W: np.ndarray, b: np.ndarray):
        if W.ndim != 2 or b.shape != (W.shape[1],):
            raise ValueError(f"{name}: inconsistent shapes W{W.shape} b{b.shape}")
        self.name = name
        self.W = W
        self.b = b
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    @classmethod
    def init(cls, name, rng, in_dim, out_dim):
        return cls(name, he_init(rng, in_dim, out_dim), np.zeros(out_dim))

    def params(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "b": self.b}

    def forward(self, H: np.ndarray, A_norm: np.ndarray) -> np.ndarray:
        if A_norm.shape[-1] != H.shape[-2] or A_norm.shape[-2] != H.shape[-2]:
            raise ValueError(f"{self.name}: adjacency {A_norm.shape} does not match nodes {H.shape}")
        if H.shape[-1] != self.W.shape[0]:
            raise ValueError(f"{self.name}: input width {H.shape[-1]} != {self.W.shape[0]}")
        AH = A_norm @ H
        z = (AH.reshape(-1, AH.shape[-1]) @ self.W).reshape(*AH.shape[:-1], -1) + self.b
        self._cache = (A_norm, AH, z)
        return check_finite(self.name, np.maximum(z, 0.0))

    def backward(self, g: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise NoForwardCacheError(f"{self.name}: backward called without a forward pass")
        A_norm, AH, z = self._cache
        delta = g * (z > 0.0)
        AH2 = AH.reshape(-1, AH.shape[-1])
        d2 = delta.reshape(-1, delta.shape[-1])
        self.grads = {"W": AH2.T @ d2, "b": d2.sum(axis=0)}
        return np.swapaxes(A_norm, -1, -2) @ (d2 @ self.W.T).reshape(*delta.shape[:-1], -1)

    def relu_pattern(self) -> np.ndarray | None:
        return None if self._cache is None else self._cache[2] > 0.0


def masked_mse(pred: np.ndarray, target: np.ndarray, sel: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over selected entries only; unselected entries get zero gradient."""
    if pred.shape != target.shape or pred.shape != sel.shape:
        raise ValueError(f"shape mismatch: {pred.shape}, {target.shape}, {sel.shape}")
    count = max(1.0, float(sel.sum()))
    diff = np.where(sel > 0, pred - target, 0.0)
    loss = float((diff * diff).sum() / count)
    return loss, 2.0 * diff / count


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """In-place update of ``params``; raises before touching anything if a gradient is bad."""
        for name, g in grads.items():
            if g.shape != params[name].shape:
                raise ValueError(f"gradient shape {g.shape} != parameter {name} {params[name].shape}")
            if not np.isfinite(g).all():
                raise NonFiniteError(f"non-finite gradient for {name}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            params[name] -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def soft_update(target: dict[str, np.ndarray], online: dict[str, np.ndarray], tau: float) -> None:
    for name, w in online.items():
        t = target[name]
        t *= 1.0 - tau
        t += tau * w


def hard_update(target: dict[str, np.ndarray], online: dict[str, np.ndarray]) -> None:
    for name, w in online.items():
        target[name][...] = w


def gradcheck(build: Callable, seed: int, h: float = 1e-5, floor: float = 1e-8) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``build(seed)`` returns ``(params, objective, pattern)``: ``params`` maps
    names to the live parameter arrays, ``objective(need_grad)`` runs the
    forward pass (and the backward pass when asked) and returns ``(loss, grads)``, and ``pattern()`` returns the ReLU
    on/off pattern of the last forward pass. Coordinates whose perturbation
    flips any ReLU are skipped since the loss is not differentiable there.
    """
    params, objective, pattern = build(seed)
    _, grads = objective()
    base = pattern()
    worst = 0.0
    for name, arr in params.items():
        analytic = grads[name]
        flat = arr.reshape(-1)
        ga = analytic.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            lp, _ = objective(False)
            same = np.array_equal(pattern(), base)
            flat[k] = orig - h
            lm, _ = objective(False)
            same = same and np.array_equal(pattern(), base)
            flat[k] = orig
            if not same:
                continue
            numeric = (lp - lm) / (2.0 * h)
            denom = max(abs(ga[k]), abs(numeric), floor)
            worst = max(worst, abs(ga[k] - numeric) / denom)
    objective()
    return worst


CHECKPOINT_MAGIC = b"GCQCKPT\x00"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: "OrderedDict[str, np.ndarray] | dict[str, np.ndarray]",
                    digest: str, meta: dict | None = None) -> None:
    """Binary container: magic, version, JSON header, then row-major little-endian float64 blobs."""
    layers = []
    blobs = []
    offset = 0
    for name, arr in params.items():
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        layers.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    payload = b"".join(blobs)
    header = {
        "version": CHECKPOINT_VERSION,
        "config_digest": digest,
        "layers": layers,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)


def load_checkpoint(path) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen])
    payload = raw[16 + hlen:]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise ValueError(f"{path}: payload checksum mismatch")
    params = OrderedDict()
    for layer in header["layers"]:
        start = layer["offset"]
        chunk = payload[start:start + layer["nbytes"]]
        params[layer["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(layer["shape"]).astype(np.float64)
    return params, header
