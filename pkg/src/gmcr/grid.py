from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Grid:
    """Periodic 1D mesh: nodes at i*dx, cells [i*dx, (i+1)*dx)."""

    n: int
    length: float

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("grid needs at least 2 nodes")
        if not self.length > 0:
            raise ValueError("domain length must be positive")

    @property
    def dx(self) -> float:
        return self.length / self.n

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.n) * self.dx

    def cell_bounds(self, c: int) -> tuple[float, float]:
        return c * self.dx, (c + 1) * self.dx if c + 1 < self.n else self.length

    def cell_of(self, x: np.ndarray) -> np.ndarray:
        return np.minimum((np.asarray(x) / self.dx).astype(np.int64), self.n - 1)

    def wrap(self, x: np.ndarray) -> np.ndarray:
        """Map positions into [0, L) exactly."""
        x = np.mod(x, self.length)
        return np.where(x >= self.length, 0.0, x)
