"""Sampled safe set and its top-hat density.

With a top-hat kernel of width ``alpha`` and threshold 0, the density at a
query is positive exactly when some stored state lies within Euclidean
distance ``alpha``; membership is answered by an exact radius search.
"""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from . import kernels
from .envs import Trajectory

# below this many stored states a linear scan beats building a tree
TREE_MIN_SIZE = 256


class SafeSetError(ValueError):
    pass


class SafeSetStore:
    """States from successful trajectories, each tagged with its iteration.

    ``buffer_size`` keeps only the most recent states (oldest evicted first).
    """

    def __init__(self, alpha: float, buffer_size: int | None = None, position_only: bool = False, state_dim: int = 4):
        if not alpha > 0:
            raise ValueError("alpha must be positive")
        if buffer_size is not None and buffer_size < 1:
            raise ValueError("buffer_size must be positive")
        self.alpha = float(alpha)
        self.delta = 0.0
        self.buffer_size = buffer_size
        self.position_only = position_only
        self.states = np.zeros((0, state_dim))
        self.tags = np.zeros(0, dtype=int)
        self._tree = None

    def __len__(self) -> int:
        return len(self.tags)

    def _points(self, x: np.ndarray) -> np.ndarray:
        return x[..., :2] if self.position_only else x

    def add_states(self, states, iteration: int) -> None:
        states = np.asarray(states, dtype=float).reshape(-1, self.states.shape[1])
        self.states = np.concatenate([self.states, states])
        self.tags = np.concatenate([self.tags, np.full(len(states), iteration, dtype=int)])
        if self.buffer_size is not None and len(self) > self.buffer_size:
            self.states = self.states[-self.buffer_size :]
            self.tags = self.tags[-self.buffer_size :]
        self._tree = None

    def add_successful_trajectory(self, traj: Trajectory, iteration: int) -> None:
        if not traj.success or traj.violation:
            raise SafeSetError(f"only successful trajectories enter the safe set (iteration {iteration})")
        self.add_states(traj.states, iteration)

    def density_positive(self, states) -> np.ndarray | bool:
        """True where some stored state lies within ``alpha`` (inclusive)."""
        q = np.asarray(states, dtype=float)
        single = q.ndim == 1
        flat = self._points(q.reshape(-1, q.shape[-1]))
        if len(self) == 0:
            out = np.zeros(len(flat), dtype=bool)
        elif len(self) < TREE_MIN_SIZE:
            out = kernels.radius_any(self._points(self.states), flat, self.alpha)
        else:
            if self._tree is None:
                self._tree = cKDTree(self._points(self.states))
            d, _ = self._tree.query(flat, k=1, distance_upper_bound=self.alpha * (1.0 + 1e-9) + 1e-12)
            out = d <= self.alpha
        return bool(out[0]) if single else out.reshape(q.shape[:-1])

    def state_dict(self) -> dict:
        return {
            "states": self.states,
            "tags": self.tags,
            "alpha": np.array(self.alpha),
            "buffer_size": np.array(-1 if self.buffer_size is None else self.buffer_size),
            "position_only": np.array(self.position_only),
        }

    @classmethod
    def from_state_dict(cls, d) -> "SafeSetStore":
        size = int(d["buffer_size"])
        out = cls(float(d["alpha"]), None if size < 0 else size, bool(d["position_only"]), d["states"].shape[1])
        out.states = np.array(d["states"], dtype=float)
        out.tags = np.array(d["tags"], dtype=int)
        return out

    def save(self, path) -> None:
        np.savez(path, **self.state_dict())

    @classmethod
    def load(cls, path) -> "SafeSetStore":
        with np.load(path) as d:
            return cls.from_state_dict(dict(d))
