"""Pinhole camera model and world-to-screen transforms."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

NEAR_EPS = 1e-4


@dataclass
class CameraModel:
    """Pinhole camera.

    ``rotation`` and ``translation`` map world points into the camera frame
    as ``e = rotation @ o + translation`` (COLMAP's world-to-camera
    convention; the camera looks down +z). Screen coordinates are
    ``x = x_e / z_e * fx + cx``; the principal point defaults to the image
    center. Pixel ``(row i, col j)`` is sampled at ``(j + 0.5, i + 0.5)``.
    """

    rotation: np.ndarray
    translation: np.ndarray
    focal: Tuple[float, float]
    size: Tuple[int, int]  # (W, H)
    principal: Optional[Tuple[float, float]] = None
    name: str = ""

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.focal = (float(self.focal[0]), float(self.focal[1]))
        self.size = (int(self.size[0]), int(self.size[1]))
        if self.principal is None:
            self.principal = (self.size[0] / 2.0, self.size[1] / 2.0)
        else:
            self.principal = (float(self.principal[0]), float(self.principal[1]))
        if min(self.focal) <= 0:
            raise ValueError(f"focal lengths must be positive, got {self.focal}")
        if min(self.size) < 1:
            raise ValueError(f"image size must be at least 1x1, got {self.size}")
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > 1e-6:
            raise ValueError(f"rotation is not orthonormal (max |R^T R - I| = {err:.2e})")

    @property
    def width(self) -> int:
        return self.size[0]

    @property
    def height(self) -> int:
        return self.size[1]

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def scaled(self, factor: float) -> "CameraModel":
        """Same pose with intrinsics and image size scaled by ``factor``."""
        w = max(1, int(round(self.size[0] * factor)))
        h = max(1, int(round(self.size[1] * factor)))
        return CameraModel(
            self.rotation,
            self.translation,
            (self.focal[0] * factor, self.focal[1] * factor),
            (w, h),
            (self.principal[0] * factor, self.principal[1] * factor),
            self.name,
        )

    @classmethod
    def look_at(cls, eye, target, up, focal, size, name: str = "") -> "CameraModel":
        """Camera at ``eye`` looking at ``target`` (+z forward, +y down on screen)."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        return cls(R, -R @ eye, focal, size, name=name)


def camera_transform(center: np.ndarray, cam: CameraModel):
    """Camera-space position and screen position of world point(s).

    Returns:
        ``(e, screen, in_front)`` where ``in_front`` is False for points with
        ``z_e <= NEAR_EPS``; their screen coordinates are NaN.
    """
    e = cam.world_to_camera(center)
    z = e[..., 2]
    in_front = z > NEAR_EPS
    with np.errstate(divide="ignore", invalid="ignore"):
        sx = e[..., 0] / z * cam.focal[0] + cam.principal[0]
        sy = e[..., 1] / z * cam.focal[1] + cam.principal[1]
    screen = np.stack([sx, sy], axis=-1)
    screen = np.where(np.asarray(in_front)[..., None], screen, np.nan)
    return e, screen, in_front
