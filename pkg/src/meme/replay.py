"""Sharded prioritised sequence replay with samples-per-insert flow control."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np


class ReplayError(ValueError):
    pass


@dataclass
class ReplayConfig:
    shards: int = 2
    capacity: int = 4096
    period: int = 8
    trace_length: int = 16
    priority_exponent: float = 0.6
    is_exponent: float = 0.4
    spi: float = 6.0
    min_inserts: int = 16


@dataclass
class TrajectorySequence:
    """Fixed-length window of one episode, zero-padded after its last step.

    Step t holds x_t, the features the network saw at t, the action a_t with
    its behaviour probability, the rewards of transition t and x_{t+1}.
    """

    mixture: int
    obs: np.ndarray          # (L, D)
    next_obs: np.ndarray     # (L, D)
    prev_action: np.ndarray  # (L,)
    scalars: np.ndarray      # (L, 4)
    ap: np.ndarray           # (L, E)
    action: np.ndarray       # (L,)
    mu: np.ndarray           # (L,)
    r_e: np.ndarray          # (L,)
    r_i: np.ndarray          # (L,)
    done: np.ndarray         # (L,) bool
    valid: np.ndarray        # (L,) bool
    init_state: np.ndarray   # (H,)
    episode: int = 0
    start: int = 0
    steps: np.ndarray | None = None  # (L,) episode step index, -1 when padded

    @property
    def length(self) -> int:
        return int(self.valid.shape[0])

    def validate(self) -> None:
        n = self.length
        for name in ("obs", "next_obs", "prev_action", "scalars", "ap", "action", "mu",
                     "r_e", "r_i", "done"):
            if getattr(self, name).shape[0] != n:
                raise ReplayError(f"field {name} has length {getattr(self, name).shape[0]} != {n}")
        v = self.valid.astype(bool)
        n_valid = int(v.sum())
        if n_valid == 0 or not v[:n_valid].all():
            raise ReplayError("valid mask must be a non-empty prefix")
        d = self.done.astype(bool)
        if d[n_valid:].any() or d[:max(n_valid - 1, 0)].any():
            raise ReplayError("a done flag may only sit on the last valid step")
        if np.any(self.mu[v] <= 0) or np.any(self.mu[v] > 1):
            raise ReplayError("behaviour probabilities must lie in (0, 1]")
        for name in ("obs", "r_e", "r_i", "scalars"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ReplayError(f"non-finite {name}")


FIELDS = ("obs", "next_obs", "prev_action", "scalars", "ap", "action", "mu", "r_e", "r_i",
          "done", "valid")


def collate(seqs: list[TrajectorySequence]) -> dict:
    """Stack sequences into time-major arrays (L, B, ...)."""
    out = {f: np.stack([getattr(s, f) for s in seqs], axis=1) for f in FIELDS}
    out["mixture"] = np.array([s.mixture for s in seqs])
    out["init_state"] = np.stack([s.init_state for s in seqs], axis=0)
    return out


class Handle(NamedTuple):
    shard: int
    slot: int
    uid: int


class ReplayShard:
    """FIFO store with priority^exponent sampling; serialises its own mutations."""

    def __init__(self, capacity: int, exponent: float = 0.6):
        self.capacity = capacity
        self.exponent = exponent
        self.items: list = [None] * capacity
        self.priorities = np.zeros(capacity)
        self.uids = np.full(capacity, -1, dtype=np.int64)
        self.size = 0
        self._next = 0
        self.inserted = 0
        self.sampled = 0
        self.lock = threading.Lock()

    def max_priority(self) -> float:
        return float(self.priorities[:self.size].max()) if self.size else 1.0

    def insert(self, seq: TrajectorySequence, priority: float | None = None) -> int:
        seq.validate()
        with self.lock:
            p = self.max_priority() if priority is None else float(priority)
            slot = self._next
            self.items[slot] = seq
            self.priorities[slot] = p
            self.uids[slot] = self.inserted
            self.inserted += 1
            self._next = (slot + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)
            return slot

    def probabilities(self) -> np.ndarray:
        w = self.priorities[:self.size] ** self.exponent
        return w / w.sum()

    def update(self, slot: int, uid: int, priority: float) -> bool:
        with self.lock:
            if self.uids[slot] != uid:
                return False
            self.priorities[slot] = priority
            return True


class Replay:
    """Shards weighted by content size; within a shard, priority^exponent."""

    def __init__(self, cfg: ReplayConfig):
        self.cfg = cfg
        per = max(cfg.capacity // cfg.shards, 1)
        self.shards = [ReplayShard(per, cfg.priority_exponent) for _ in range(cfg.shards)]
        self._count_lock = threading.Lock()
        self.inserts = 0
        self.samples = 0

    def __len__(self) -> int:
        return sum(s.size for s in self.shards)

    def insert(self, seq: TrajectorySequence, shard: int = 0) -> None:
        self.shards[shard % len(self.shards)].insert(seq)
        with self._count_lock:
            self.inserts += 1

    def sample(self, batch_size: int, rng: np.random.Generator):
        """Returns (sequences, IS weights, handles, probabilities)."""
        with_locks = [s.lock for s in self.shards]
        for lk in with_locks:
            lk.acquire()
        try:
            sizes = np.array([s.size for s in self.shards], dtype=np.float64)
            total = sizes.sum()
            if total == 0:
                raise ReplayError("replay is empty")
            shard_idx = rng.choice(len(self.shards), size=batch_size, p=sizes / total)
            seqs, handles, probs = [], [], []
            for k in shard_idx:
                sh = self.shards[k]
                p = sh.probabilities()
                slot = int(rng.choice(sh.size, p=p))
                seqs.append(sh.items[slot])
                handles.append(Handle(int(k), slot, int(sh.uids[slot])))
                probs.append(sizes[k] / total * p[slot])
                sh.sampled += 1
        finally:
            for lk in with_locks:
                lk.release()
        probs = np.array(probs)
        w = importance_weights(probs, int(total), self.cfg.is_exponent)
        with self._count_lock:
            self.samples += batch_size
        return seqs, w, handles, probs

    def update_priorities(self, handles, priorities) -> int:
        n = 0
        for h, p in zip(handles, priorities):
            n += self.shards[h.shard].update(h.slot, h.uid, float(p))
        return n


def importance_weights(probs, size: int, exponent: float) -> np.ndarray:
    w = (1.0 / (np.asarray(probs, dtype=np.float64) * size)) ** exponent
    return w / w.max()


def spi_permit(inserts: int, samples: int, spi: float, batch: int) -> bool:
    """Learner may consume a batch only while (samples + batch) / inserts <= spi."""
    return inserts > 0 and (samples + batch) / inserts <= spi


def actor_permit(inserts: int, samples: int, spi: float, slack: float) -> bool:
    """Keep actors from running more than ``slack`` sample-units ahead of the learner."""
    return inserts * spi - samples <= slack


@dataclass
class _Step:
    obs: np.ndarray
    next_obs: np.ndarray
    prev_action: int
    scalars: np.ndarray
    ap: np.ndarray
    action: int
    mu: float
    r_e: float
    r_i: float
    done: bool
    state: np.ndarray


@dataclass
class SequenceBuilder:
    """Cuts one actor's episode into overlapping fixed-length windows."""

    trace_length: int
    period: int
    obs_dim: int
    ap_dim: int
    mixture: int = 0
    episode: int = 0
    steps: list = field(default_factory=list)
    next_start: int = 0

    def begin(self, mixture: int, episode: int) -> None:
        self.mixture, self.episode = mixture, episode
        self.steps = []
        self.next_start = 0

    def add(self, **step) -> list[TrajectorySequence]:
        self.steps.append(_Step(**step))
        out = []
        while self.next_start + self.trace_length <= len(self.steps):
            out.append(self._window(self.next_start))
            self.next_start += self.period
        return out

    def finish(self) -> list[TrajectorySequence]:
        """Flush the remaining (padded) windows at episode end."""
        out = []
        while self.next_start < len(self.steps):
            out.append(self._window(self.next_start))
            self.next_start += self.period
        self.steps = []
        return out

    def _window(self, start: int) -> TrajectorySequence:
        chunk = self.steps[start:start + self.trace_length]
        n = len(chunk)

        def stack(name, shape, dtype):
            vals = [getattr(s, name) for s in chunk]
            arr = np.zeros((self.trace_length,) + shape, dtype=dtype)
            arr[:n] = np.asarray(vals, dtype=dtype).reshape((n,) + shape)
            return arr

        mu = stack("mu", (), np.float64)
        mu[n:] = 1.0
        valid = np.zeros(self.trace_length, bool)
        valid[:n] = True
        steps = np.full(self.trace_length, -1, dtype=np.int64)
        steps[:n] = np.arange(start, start + n)
        return TrajectorySequence(
            mixture=self.mixture,
            obs=stack("obs", (self.obs_dim,), np.float32),
            next_obs=stack("next_obs", (self.obs_dim,), np.float32),
            prev_action=stack("prev_action", (), np.int64),
            scalars=stack("scalars", (4,), np.float32),
            ap=stack("ap", (self.ap_dim,), np.float32),
            action=stack("action", (), np.int64),
            mu=mu,
            r_e=stack("r_e", (), np.float64),
            r_i=stack("r_i", (), np.float64),
            done=stack("done", (), bool),
            valid=valid,
            init_state=np.asarray(chunk[0].state, dtype=np.float32).copy(),
            episode=self.episode,
            start=start,
            steps=steps,
        )
