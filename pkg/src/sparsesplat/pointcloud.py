from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass
class PointCloud:
    """Point positions (N, 3) with optional RGB colors in [0, 1]."""

    positions: np.ndarray
    colors: Optional[np.ndarray] = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("point positions must be finite")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(self.colors) != len(self.positions):
                raise ValueError("colors must have one row per point")

    def __len__(self) -> int:
        return len(self.positions)

    def subset(self, index) -> "PointCloud":
        return PointCloud(self.positions[index], None if self.colors is None else self.colors[index])

    def bounds(self):
        return self.positions.min(axis=0), self.positions.max(axis=0)

    def extent(self) -> float:
        """Diagonal length of the bounding box."""
        if len(self) == 0:
            return 0.0
        lo, hi = self.bounds()
        return float(np.linalg.norm(hi - lo))
