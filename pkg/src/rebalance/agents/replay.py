from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    reward: float
    s_next: np.ndarray
    done: bool = False
    region_rewards: np.ndarray | None = None

    def __post_init__(self):
        if self.reward < 0:
            raise ValueError("reward must be nonnegative")
        for arr in (self.s, self.a, self.s_next):
            if not np.all(np.isfinite(arr)):
                raise ValueError("transition contains non-finite entries")


class ReplayBuffer:
    """Fixed-capacity ring buffer with uniform minibatch sampling (with replacement)."""

    def __init__(self, capacity: int, obs_dim: int, n_regions: int, seed: int | None = None):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.s = np.zeros((capacity, obs_dim))
        self.a = np.zeros((capacity, n_regions))
        self.r = np.zeros(capacity)
        self.r_region = np.zeros((capacity, n_regions))
        self.s2 = np.zeros((capacity, obs_dim))
        self.done = np.zeros(capacity)
        self.rng = np.random.default_rng(seed)
        self._next = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, t: Transition) -> None:
        k = self._next
        self.s[k] = t.s
        self.a[k] = t.a
        self.r[k] = t.reward
        self.r_region[k] = t.region_rewards if t.region_rewards is not None else 0.0
        self.s2[k] = t.s_next
        self.done[k] = float(t.done)
        self._next = (k + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, batch_size: int) -> np.ndarray:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return self.rng.integers(0, self.size, size=batch_size)

    def sample(self, batch_size: int) -> dict[str, np.ndarray]:
        idx = self.sample_indices(batch_size)
        return {
            "s": self.s[idx],
            "a": self.a[idx],
            "r": self.r[idx],
            "r_region": self.r_region[idx],
            "s2": self.s2[idx],
            "done": self.done[idx],
        }
