"""Graph Q-learning with experience replay and a target network.

Every CAV slot is treated as one agent sharing the network and the scalar
reward, so a transition contributes one TD target per CAV: the Q entry of the
action that CAV actually took.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .env import HighwayEnv, next_alive
from .model import N_ACTIONS, GCQNetwork, select_actions
from .nn import Adam, hard_update, masked_mse, save_checkpoint, soft_update
from .observation import FEATURE_DIM, PAD_ID, CapacityError, ObservationTensor

LOG = logging.getLogger(__name__)

NO_ACTION = -1
_ROW_OFFSET = 1 << 40
_PAD_KEY = 1 << 39


class TrainingError(RuntimeError):
    pass


@dataclass
class Transition:
    s: ObservationTensor
    actions: np.ndarray  # (N,) int, NO_ACTION outside CAV slots
    r: float
    s_next: ObservationTensor
    done: bool
    next_alive: np.ndarray  # (N,) 1 where the slot's vehicle is still present in s_next


@dataclass
class Batch:
    X: np.ndarray
    A: np.ndarray
    M: np.ndarray
    ids: np.ndarray
    actions: np.ndarray
    r: np.ndarray
    X_next: np.ndarray
    A_next: np.ndarray
    M_next: np.ndarray
    ids_next: np.ndarray
    done: np.ndarray
    next_alive: np.ndarray
    index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self):
        return self.r.shape[0]

    @classmethod
    def from_transitions(cls, transitions: list[Transition]) -> "Batch":
        def stack(get):
            return np.stack([get(t) for t in transitions])

        return cls(
            X=stack(lambda t: t.s.X), A=stack(lambda t: t.s.A), M=stack(lambda t: t.s.M),
            ids=stack(lambda t: t.s.slot_ids), actions=stack(lambda t: t.actions),
            r=np.array([t.r for t in transitions], dtype=np.float64),
            X_next=stack(lambda t: t.s_next.X), A_next=stack(lambda t: t.s_next.A),
            M_next=stack(lambda t: t.s_next.M), ids_next=stack(lambda t: t.s_next.slot_ids),
            done=np.array([t.done for t in transitions], dtype=bool),
            next_alive=stack(lambda t: t.next_alive),
            index=np.arange(len(transitions)),
        )


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions stored as preallocated arrays.

    Node features are kept in float32 and adjacency matrices bit-packed, which
    brings a full 100k buffer at N_max=40 down to roughly 350 MB.
    """

    def __init__(self, capacity: int, n_max: int, feature_dim: int = FEATURE_DIM):
        self.capacity = capacity
        self.n_max = n_max
        self.feature_dim = feature_dim
        nn_ = n_max * n_max
        packed = (nn_ + 7) // 8
        self._X = np.zeros((2, capacity, n_max, feature_dim), dtype=np.float32)
        self._A = np.zeros((2, capacity, packed), dtype=np.uint8)
        self._M = np.zeros((2, capacity, n_max), dtype=bool)
        self._ids = np.zeros((2, capacity, n_max), dtype=np.int64)
        self._n = np.zeros((2, capacity), dtype=np.int32)
        self._actions = np.zeros((capacity, n_max), dtype=np.int8)
        self._r = np.zeros(capacity, dtype=np.float64)
        self._done = np.zeros(capacity, dtype=bool)
        self._alive = np.zeros((capacity, n_max), dtype=bool)
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def _put_obs(self, which: int, i: int, obs: ObservationTensor) -> None:
        self._X[which, i] = obs.X
        self._A[which, i] = np.packbits(obs.A.reshape(-1) > 0)
        self._M[which, i] = obs.M > 0
        self._ids[which, i] = obs.slot_ids
        self._n[which, i] = obs.n_real

    def push(self, t: Transition) -> None:
        if t.s.n_max != self.n_max or t.s_next.n_max != self.n_max:
            raise ValueError("transition padded to a different N_max than the buffer")
        i = self._next
        self._put_obs(0, i, t.s)
        self._put_obs(1, i, t.s_next)
        self._actions[i] = t.actions
        self._r[i] = t.r
        self._done[i] = t.done
        self._alive[i] = t.next_alive > 0
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def _slot(self, k: int) -> int:
        """Physical slot of the k-th oldest stored transition."""
        start = self._next if self._size == self.capacity else 0
        return (start + k) % self.capacity

    def _obs(self, which: int, i: int) -> ObservationTensor:
        A = self._unpack(self._A[which, [i]])[0]
        return ObservationTensor(self._X[which, i].astype(np.float64), A,
                                 self._M[which, i].astype(np.float64), self._ids[which, i].copy(),
                                 int(self._n[which, i]))

    def __getitem__(self, k: int) -> Transition:
        if not 0 <= k < self._size:
            raise IndexError(k)
        i = self._slot(k)
        return Transition(self._obs(0, i), self._actions[i].astype(np.int64), float(self._r[i]),
                          self._obs(1, i), bool(self._done[i]), self._alive[i].astype(np.float64))

    def _unpack(self, packed: np.ndarray) -> np.ndarray:
        n = self.n_max
        bits = np.unpackbits(packed, axis=-1, count=n * n)
        return bits.reshape(packed.shape[0], n, n).astype(np.float64)

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform with replacement over the current contents (physical slots)."""
        return rng.integers(0, self._size, size=batch_size)

    def gather(self, idx: np.ndarray) -> Batch:
        return Batch(
            X=self._X[0, idx].astype(np.float64), A=self._unpack(self._A[0, idx]),
            M=self._M[0, idx].astype(np.float64), ids=self._ids[0, idx],
            actions=self._actions[idx].astype(np.int64), r=self._r[idx],
            X_next=self._X[1, idx].astype(np.float64), A_next=self._unpack(self._A[1, idx]),
            M_next=self._M[1, idx].astype(np.float64), ids_next=self._ids[1, idx],
            done=self._done[idx], next_alive=self._alive[idx].astype(np.float64), index=idx,
        )

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        return self.gather(self.sample_indices(batch_size, rng))


def match_slots(ids: np.ndarray, ids_next: np.ndarray) -> np.ndarray:
    """For every slot of ``ids`` the slot holding the same vehicle in ``ids_next``, else -1.

    Both arrays are ``(B, N)`` with real ids ascending and PAD_ID padding at
    the end of each row.
    """
    B, N = ids.shape
    offsets = (np.arange(B, dtype=np.int64) * _ROW_OFFSET)[:, None]
    keys = (np.where(ids_next == PAD_ID, _PAD_KEY, ids_next) + offsets).reshape(-1)
    query = (ids + offsets).reshape(-1)
    pos = np.searchsorted(keys, query)
    pos_c = np.minimum(pos, keys.size - 1)
    found = (keys[pos_c] == query) & (ids.reshape(-1) != PAD_ID)
    slot = np.where(found, pos_c - np.repeat(np.arange(B), N) * N, -1)
    return slot.reshape(B, N)


def compute_targets(batch: Batch, target_net: GCQNetwork, gamma: float,
                    online_net: GCQNetwork | None = None) -> tuple[np.ndarray, np.ndarray]:
    """TD targets and the (slot, taken action) selection mask.

    With ``online_net`` given the bootstrap action is the online argmax
    (double Q); otherwise the target network's own max is used.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    B, N = batch.actions.shape
    q_next = target_net.forward(batch.X_next, batch.A_next, batch.M_next)
    if online_net is not None:
        a_star = online_net.forward(batch.X_next, batch.A_next, batch.M_next).argmax(axis=-1)
        boot = np.take_along_axis(q_next, a_star[..., None], axis=-1)[..., 0]
    else:
        boot = q_next.max(axis=-1)

    slots = match_slots(batch.ids, batch.ids_next)
    alive = batch.next_alive > 0
    if np.any(alive & (slots < 0)):
        b, i = np.argwhere(alive & (slots < 0))[0]
        raise TrainingError(f"vehicle {batch.ids[b, i]} marked alive but absent from s_next "
                            f"(batch row {b}, buffer index {batch.index[b] if batch.index.size else b})")
    rows = np.repeat(np.arange(B), N).reshape(B, N)
    boot_slot = np.where(slots >= 0, boot[rows, np.maximum(slots, 0)], 0.0)
    cont = (~batch.done)[:, None] & alive
    y_slot = batch.r[:, None] + gamma * np.where(cont, boot_slot, 0.0)

    acted = batch.actions >= 0
    sel = np.zeros((B, N, N_ACTIONS))
    b_idx, i_idx = np.nonzero(acted)
    sel[b_idx, i_idx, batch.actions[b_idx, i_idx]] = 1.0
    y = np.where(sel > 0, y_slot[..., None], 0.0)
    return y, sel


def train_step(online: GCQNetwork, target: GCQNetwork, buffer: ReplayBuffer, batch_size: int,
               gamma: float, adam: Adam, rng: np.random.Generator, tau: float | None = 0.01,
               double_q: bool = False, step_index: int = 0) -> float | None:
    """One Adam step on a sampled batch, then a soft target update unless ``tau`` is None."""
    if len(buffer) < batch_size:
        LOG.warning("replay buffer holds %d < %d transitions; skipping update", len(buffer), batch_size)
        return None
    batch = buffer.sample(batch_size, rng)
    y, sel = compute_targets(batch, target, gamma, online if double_q else None)
    q = online.forward(batch.X, batch.A, batch.M)
    loss, dq = masked_mse(q, y, sel)
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite loss at step {step_index}; batch indices {batch.index.tolist()}")
    grads, _ = online.backward(dq)
    adam.step(online.parameters(), grads)
    if tau is not None:
        soft_update(target.parameters(), online.parameters(), tau)
    return loss


def encode_actions(obs: ObservationTensor, commands) -> np.ndarray:
    actions = np.full(obs.n_max, NO_ACTION, dtype=np.int64)
    for slot in obs.cav_slots():
        actions[slot] = int(commands[int(obs.slot_ids[slot])])
    return actions


def collect_step(env: HighwayEnv, obs: ObservationTensor, net: GCQNetwork, epsilon: float,
                 buffer: ReplayBuffer | None, rng: np.random.Generator):
    """Act, step the simulator, store the transition.

    Returns ``(next_obs, reward, done, truncated)``: ``done`` marks a
    collision (terminal), ``truncated`` the horizon cut (bootstrapped).
    """
    if epsilon >= 1.0:
        q = np.zeros((obs.n_max, N_ACTIONS))
    else:
        q = net.forward_obs(obs)
    commands = select_actions(q, obs, epsilon, rng)
    events, rb = env.step(commands)
    next_obs = env.observe()
    done = events.terminal_collision
    truncated = not done and env.stats.steps >= env.horizon
    if buffer is not None:
        buffer.push(Transition(obs, encode_actions(obs, commands), rb.total, next_obs, done,
                               next_alive(obs, next_obs)))
    return next_obs, rb.total, done, truncated


@dataclass
class TrainResult:
    out_dir: Path
    metrics_path: Path
    final_checkpoint: Path
    records: list[dict]
    online: GCQNetwork


def _episode_seed(config: RunConfig, episode: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([config.seed, 100, episode])


def _stream(config: RunConfig, k: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([config.seed, k]))


def checkpoint_meta(config: RunConfig, step: int) -> dict:
    return {"config": config.to_flat(), "structural_digest": config.structural_digest(), "step": step}


def run_training(config: RunConfig, out_dir: str | Path, log_every: int = 20) -> TrainResult:
    """Warm-up with random actions, then epsilon-greedy acting with one update per ``train_every`` steps.

    Writes ``metrics.jsonl`` (a header line, then one record per episode),
    periodic ``checkpoints/step_<t>.ckpt`` and ``checkpoints/final.ckpt``.
    """
    sched = config.schedule
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"
    (out / "config.txt").write_text(config.dump())

    online = GCQNetwork(seed=_stream(config, 0))
    target = online.clone()
    adam = Adam(lr=sched.lr)
    act_rng = _stream(config, 1)
    sample_rng = _stream(config, 2)
    buffer = ReplayBuffer(sched.replay_capacity, config.n_max)
    env = HighwayEnv(config)
    hard_every = config.ablation.hard_target_every
    tau = None if hard_every > 0 else sched.tau

    records = []
    episode = 0
    obs = env.reset(_episode_seed(config, episode))
    losses: list[float] = []
    t0 = time.perf_counter()
    with open(metrics_path, "w") as mf:
        header = {"type": "header", "config_digest": config.digest(),
                  "structural_digest": config.structural_digest(), "config": config.to_flat()}
        mf.write(json.dumps(header, sort_keys=True) + "\n")

        def close_episode(epsilon: float) -> None:
            st = env.stats
            rec = {
                "type": "episode", "episode": episode, "global_step": t + 1, "steps": st.steps,
                "reward_total": st.reward_total, "reward_intention": st.reward_intention,
                "reward_speed": st.reward_speed, "penalty_collision": st.penalty_collision,
                "penalty_lane_change": st.penalty_lane_change, "collisions": st.collisions,
                "merges_ok": st.merges_ok, "merges_failed": st.merges_failed,
                "mean_loss": float(np.mean(losses)) if losses else None, "epsilon": epsilon,
                "wallclock_s": round(time.perf_counter() - t0, 3),
            }
            records.append(rec)
            mf.write(json.dumps(rec, sort_keys=True) + "\n")
            if log_every and episode % log_every == 0:
                LOG.info("episode %d step %d reward %.2f collisions %d loss %s",
                         episode, t + 1, st.reward_total, st.collisions, rec["mean_loss"])

        for t in range(sched.total_steps):
            warm = t < sched.warmup_steps
            epsilon = 1.0 if warm else sched.epsilon
            try:
                obs, _, done, truncated = collect_step(env, obs, online, epsilon, buffer, act_rng)
            except CapacityError as exc:
                raise TrainingError(f"episode {episode} (seed {config.seed}), step {t}: {exc}") from exc
            if not warm and t % sched.train_every == 0:
                loss = train_step(online, target, buffer, sched.batch_size, sched.gamma, adam,
                                  sample_rng, tau, config.ablation.double_q, t)
                if loss is not None:
                    losses.append(loss)
                if hard_every > 0 and (t + 1) % hard_every == 0:
                    hard_update(target.parameters(), online.parameters())
            if (t + 1) % sched.checkpoint_every == 0:
                save_checkpoint(out / "checkpoints" / f"step_{t + 1}.ckpt", online.parameters(),
                                config.digest(), checkpoint_meta(config, t + 1))
            if done or truncated:
                close_episode(epsilon)
                episode += 1
                losses = []
                obs = env.reset(_episode_seed(config, episode))
        if env.stats.steps:
            close_episode(epsilon)

    final = out / "checkpoints" / "final.ckpt"
    save_checkpoint(final, online.parameters(), config.digest(), checkpoint_meta(config, sched.total_steps))
    return TrainResult(out, metrics_path, final, records, online)
