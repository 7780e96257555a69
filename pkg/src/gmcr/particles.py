from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Particles:
    """Struct-of-arrays particle set for one species.

    ``x`` (n,) positions, ``v`` (n, D) velocities, ``alpha`` (n,) weights.
    """

    x: np.ndarray
    v: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).reshape(-1)
        v = np.asarray(self.v, dtype=float)
        self.v = v.reshape(self.x.size, -1) if v.size or self.x.size else v.reshape(0, 1)
        self.alpha = np.asarray(self.alpha, dtype=float).reshape(-1)
        if not (self.v.shape[0] == self.x.size == self.alpha.size):
            raise ValueError("x, v and alpha must have the same length")

    @classmethod
    def empty(cls, dim: int = 1) -> "Particles":
        return cls(np.empty(0), np.empty((0, dim)), np.empty(0))

    @classmethod
    def concatenate(cls, parts, dim: int = 1) -> "Particles":
        parts = list(parts)
        if not parts:
            return cls.empty(dim)
        return cls(np.concatenate([p.x for p in parts]),
                   np.concatenate([p.v for p in parts]),
                   np.concatenate([p.alpha for p in parts]))

    def __len__(self):
        return self.x.size

    @property
    def dim(self) -> int:
        return self.v.shape[1]

    def take(self, idx) -> "Particles":
        return Particles(self.x[idx], self.v[idx], self.alpha[idx])

    def copy(self) -> "Particles":
        return Particles(self.x.copy(), self.v.copy(), self.alpha.copy())

    def momentum(self) -> np.ndarray:
        return self.alpha @ self.v

    def second_moment(self) -> float:
        """Sum of alpha * |v|^2 (twice the kinetic energy for unit mass)."""
        return float(self.alpha @ (self.v ** 2).sum(axis=1))
