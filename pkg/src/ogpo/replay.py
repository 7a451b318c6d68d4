"""Chunk-transition replay, the success buffer, and mixed offline/online sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ChunkTransition:
    s: np.ndarray
    a: np.ndarray
    rewards: np.ndarray  # h primitive rewards, zero-padded after termination
    s_next: np.ndarray
    done: bool
    truncated: bool
    episode_id: int
    success: bool = False


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    rewards: np.ndarray
    s_next: np.ndarray
    done: np.ndarray
    truncated: np.ndarray
    episode_id: np.ndarray
    from_offline: np.ndarray

    def __len__(self):
        return self.s.shape[0]


class RolloutBuffer:
    """FIFO ring of chunk transitions with per-episode staging."""

    def __init__(self, obs_dim: int, act_dim: int, h: int, capacity: int = 1_000_000):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.obs_dim, self.act_dim, self.h = obs_dim, act_dim, h
        self._alloc = min(capacity, 1024)
        self.s = np.zeros((self._alloc, obs_dim))
        self.a = np.zeros((self._alloc, act_dim))
        self.rewards = np.zeros((self._alloc, h))
        self.s_next = np.zeros((self._alloc, obs_dim))
        self.done = np.zeros(self._alloc, dtype=bool)
        self.truncated = np.zeros(self._alloc, dtype=bool)
        self.episode_id = np.zeros(self._alloc, dtype=np.int64)
        self.cursor = 0
        self.size = 0
        self.staged: dict[int, list[int]] = {}
        self.finalized: set[int] = set()

    def __len__(self):
        return self.size

    def _grow(self):
        new = min(self.capacity, self._alloc * 2)
        for name in ("s", "a", "rewards", "s_next", "done", "truncated", "episode_id"):
            old = getattr(self, name)
            arr = np.zeros((new,) + old.shape[1:], dtype=old.dtype)
            arr[: self._alloc] = old
            setattr(self, name, arr)
        self._alloc = new

    def push(self, tr: ChunkTransition) -> int:
        if len(tr.rewards) != self.h:
            raise ValueError(f"expected {self.h} rewards, got {len(tr.rewards)}")
        if tr.episode_id in self.finalized:
            raise ValueError(f"episode {tr.episode_id} already finalized")
        if self.cursor >= self._alloc and self._alloc < self.capacity:
            self._grow()
        i = self.cursor
        self.s[i], self.a[i], self.rewards[i], self.s_next[i] = tr.s, tr.a, tr.rewards, tr.s_next
        self.done[i], self.truncated[i], self.episode_id[i] = tr.done, tr.truncated, tr.episode_id
        self.staged.setdefault(tr.episode_id, []).append(i)
        self.cursor = (self.cursor + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        return i

    def get(self, idx) -> Batch:
        idx = np.asarray(idx)
        return Batch(self.s[idx], self.a[idx], self.rewards[idx], self.s_next[idx], self.done[idx],
                     self.truncated[idx], self.episode_id[idx], np.zeros(idx.shape, dtype=bool))

    def finalize_episode(self, succ: "SuccessBuffer", episode_id: int, success: bool) -> None:
        if episode_id not in self.staged:
            raise KeyError(f"unknown or already finalized episode {episode_id}")
        rows = self.staged.pop(episode_id)
        self.finalized.add(episode_id)
        if success:
            # rows evicted while the episode was still running are skipped; a slot
            # reused within the same episode is copied once
            live = list(dict.fromkeys(i for i in rows if self.episode_id[i] == episode_id))
            succ.add(self.s[live], self.a[live], episode_id)

    def sample_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return rng.integers(0, self.size, size=n)


class SuccessBuffer:
    """(s, a) pairs from episodes that ended in success."""

    def __init__(self, obs_dim: int, act_dim: int):
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self._s: list[np.ndarray] = []
        self._a: list[np.ndarray] = []
        self._ep: list[np.ndarray] = []
        self._cache = None

    def __len__(self):
        return int(sum(len(x) for x in self._s))

    def add(self, s, a, episode_id: int):
        s = np.asarray(s, dtype=np.float64).reshape(-1, self.obs_dim)
        a = np.asarray(a, dtype=np.float64).reshape(-1, self.act_dim)
        if len(s) == 0:
            return
        self._s.append(s.copy())
        self._a.append(a.copy())
        self._ep.append(np.full(len(s), episode_id, dtype=np.int64))
        self._cache = None

    def arrays(self):
        if self._cache is None:
            if not self._s:
                self._cache = (np.zeros((0, self.obs_dim)), np.zeros((0, self.act_dim)), np.zeros(0, dtype=np.int64))
            else:
                self._cache = (np.concatenate(self._s), np.concatenate(self._a), np.concatenate(self._ep))
        return self._cache

    def sample(self, n: int, rng: np.random.Generator):
        s, a, _ = self.arrays()
        if len(s) == 0:
            return s, a
        idx = rng.integers(0, len(s), size=n)
        return s[idx], a[idx]


def sample_batch(buf: RolloutBuffer, offline: RolloutBuffer | None, r_offline: float, n: int,
                 rng: np.random.Generator) -> Batch:
    """Each row comes from ``offline`` with probability ``r_offline``, else from ``buf``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 <= r_offline <= 1.0:
        raise ValueError("r_offline must lie in [0, 1]")
    if r_offline > 0 and (offline is None or len(offline) == 0):
        raise ValueError("r_offline > 0 requires an offline dataset")
    from_off = rng.random(n) < r_offline if r_offline > 0 else np.zeros(n, dtype=bool)
    n_off = int(from_off.sum())
    if n_off < n and len(buf) == 0:
        raise ValueError("cannot sample from an empty buffer")
    parts = []
    if n - n_off:
        parts.append(buf.get(buf.sample_indices(n - n_off, rng)))
    if n_off:
        b = offline.get(offline.sample_indices(n_off, rng))
        b.from_offline[:] = True
        parts.append(b)
    if len(parts) == 1:
        out = parts[0]
    else:
        out = Batch(*[np.concatenate([getattr(p, f) for p in parts]) for f in Batch.__dataclass_fields__])
    # restore the per-row interleaving drawn above
    order = np.empty(n, dtype=np.int64)
    order[~from_off] = np.arange(n - n_off)
    order[from_off] = np.arange(n - n_off, n)
    return Batch(*[getattr(out, f)[order] for f in Batch.__dataclass_fields__])
