"""3D smoothing filter bounding each Gaussian's frequency by camera sampling rate."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .camera import CameraModel, camera_transform


@dataclass
class SmoothingConfig:
    alpha_margin: float = 0.15
    s_filter: float = 0.2
    fallback_frequency: Optional[float] = None  # None -> derived from fallback_far
    fallback_far: float = 100.0

    def __post_init__(self):
        if self.alpha_margin < 0:
            raise ValueError("alpha_margin must be >= 0")
        if self.s_filter <= 0:
            raise ValueError("s_filter must be > 0")
        if self.fallback_frequency is not None and self.fallback_frequency <= 0:
            raise ValueError("fallback_frequency must be > 0")
        if self.fallback_far <= 0:
            raise ValueError("fallback_far must be > 0")

    def resolve_fallback(self, cameras: Sequence[CameraModel]) -> float:
        if self.fallback_frequency is not None:
            return self.fallback_frequency
        return max(max(c.focal) for c in cameras) / self.fallback_far


@dataclass
class FrequencyTable:
    zeta: np.ndarray
    visible_count: np.ndarray


def compute_max_frequency(centers_or_scene, cameras: Sequence[CameraModel], cfg: SmoothingConfig) -> FrequencyTable:
    """Per-Gaussian maximal sampling frequency ``max_i f_i / z_i`` over cameras.

    A camera qualifies for a Gaussian when the center is in front of it and
    projects inside the screen extended by ``alpha_margin`` on every side.
    The focal used is ``max(fx, fy)``.
    """
    if len(cameras) == 0:
        raise ValueError("at least one camera is required")
    centers = getattr(centers_or_scene, "centers", centers_or_scene)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    zeta = np.zeros(len(centers))
    count = np.zeros(len(centers), dtype=np.int64)
    a = cfg.alpha_margin
    for cam in cameras:
        e, screen, in_front = camera_transform(centers, cam)
        W, H = cam.size
        with np.errstate(invalid="ignore"):
            ok = (
                in_front
                & (screen[:, 0] >= -a * W)
                & (screen[:, 0] <= (1 + a) * W)
                & (screen[:, 1] >= -a * H)
                & (screen[:, 1] <= (1 + a) * H)
            )
        freq = np.where(ok, max(cam.focal) / np.where(ok, e[:, 2], 1.0), 0.0)
        zeta = np.maximum(zeta, freq)
        count += ok
    zeta[count == 0] = cfg.resolve_fallback(cameras)
    return FrequencyTable(zeta=zeta, visible_count=count)


def filter_variance(zeta, s: float):
    """Isotropic variance ``s / zeta^2`` added by the filter."""
    return s / np.square(np.asarray(zeta, dtype=np.float64))


def apply_smoothing_filter(cov: np.ndarray, opacity, zeta, s: float):
    """Widen covariance(s) by ``s/zeta^2 I`` and rescale opacity to preserve energy.

    Accepts one covariance (3, 3) or a batch (N, 3, 3).

    Returns:
        ``(cov_s, opacity_s)`` with ``opacity_s = opacity * sqrt(det cov / det cov_s)``.
    """
    cov = np.asarray(cov, dtype=np.float64)
    zeta = np.asarray(zeta, dtype=np.float64)
    if np.any(zeta <= 0) or s <= 0:
        raise ValueError("zeta and s must be positive")
    var = filter_variance(zeta, s)
    cov_s = cov + np.asarray(var)[..., None, None] * np.eye(3)
    factor = np.sqrt(np.linalg.det(cov) / np.linalg.det(cov_s))
    return cov_s, np.asarray(opacity, dtype=np.float64) * factor
