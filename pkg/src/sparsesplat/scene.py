"""Gaussian scene representation and covariance math.

A :class:`Scene` stores its Gaussians as parallel arrays (one row per
Gaussian) because every consumer (rasterizer, optimizer, PLY writer)
works on whole populations at once. :class:`GaussianPrimitive` is the
per-Gaussian view used at API boundaries and in tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, List, Optional

import numpy as np

from .sh import degree_from_basis, num_basis


class InvalidRotationError(ValueError):
    pass


class DegenerateCovarianceError(ValueError):
    pass


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def normalize_quaternion(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise InvalidRotationError("zero quaternion has no rotation")
    return q / norm


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix for (w, x, y, z) quaternion(s); input is normalized first."""
    q = normalize_quaternion(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    R[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    R[..., 0, 1] = 2.0 * (x * y - w * z)
    R[..., 0, 2] = 2.0 * (x * z + w * y)
    R[..., 1, 0] = 2.0 * (x * y + w * z)
    R[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    R[..., 1, 2] = 2.0 * (y * z - w * x)
    R[..., 2, 0] = 2.0 * (x * z - w * y)
    R[..., 2, 1] = 2.0 * (y * z + w * x)
    R[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return R


def matrix_to_quaternion(R: np.ndarray) -> np.ndarray:
    """(w, x, y, z) quaternion with w >= 0 for a single rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    m00, m01, m02 = R[0]
    m10, m11, m12 = R[1]
    m20, m21, m22 = R[2]
    # Symmetric eigen-solve is robust for all rotation angles.
    K = np.array(
        [
            [m00 - m11 - m22, 0.0, 0.0, 0.0],
            [m01 + m10, m11 - m00 - m22, 0.0, 0.0],
            [m02 + m20, m12 + m21, m22 - m00 - m11, 0.0],
            [m21 - m12, m02 - m20, m10 - m01, m00 + m11 + m22],
        ]
    ) / 3.0
    vals, vecs = np.linalg.eigh(K, UPLO="L")
    x, y, z, w = vecs[:, np.argmax(vals)]
    q = np.array([w, x, y, z])
    if q[0] < 0:
        q = -q
    return q


def build_covariance(rotation: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """Covariance ``R diag(scale^2) R^T`` for quaternion(s) and positive scale(s).

    Works on a single Gaussian ((4,), (3,)) or a batch ((N, 4), (N, 3)).
    """
    scale = np.asarray(scale, dtype=np.float64)
    if np.any(scale <= 0):
        raise ValueError("scale must be componentwise positive")
    R = quaternion_to_matrix(rotation)
    M = R * scale[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def _regularized_inverse(cov: np.ndarray) -> np.ndarray:
    cov = np.asarray(cov, dtype=np.float64)
    if np.linalg.cond(cov) < 1e12:
        return np.linalg.inv(cov)
    eps = 1e-9 * np.trace(cov) / 3.0
    reg = cov + eps * np.eye(3)
    if eps <= 0 or not np.isfinite(eps) or np.linalg.cond(reg) >= 1e15:
        raise DegenerateCovarianceError("covariance is singular even after regularization")
    return np.linalg.inv(reg)


def gaussian_value(x: np.ndarray, center: np.ndarray, cov: np.ndarray) -> float:
    """Unnormalized Gaussian ``exp(-0.5 (x-mu)^T cov^-1 (x-mu))``."""
    d = np.asarray(x, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    inv = _regularized_inverse(cov)
    return float(np.exp(-0.5 * d @ inv @ d))


@dataclass
class GaussianPrimitive:
    center: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    sh_coeffs: np.ndarray  # (3, B)

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    @property
    def covariance(self) -> np.ndarray:
        return build_covariance(self.rotation, self.scale)


@dataclass
class Scene:
    """Population of Gaussians stored as parallel arrays.

    Attributes:
        centers: (N, 3) world positions.
        rotations: (N, 4) quaternions (w, x, y, z).
        log_scales: (N, 3) per-axis log standard deviations.
        opacity_logits: (N,) pre-sigmoid opacities.
        sh_coeffs: (N, 3, B) color coefficients, B = (sh_degree + 1)^2.
        smoothing_state: optional (N,) maximal sampling frequency per Gaussian.
    """

    centers: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray
    smoothing_state: Optional[np.ndarray] = None
    sh_degree: int = field(default=-1)

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 3)
        n = len(self.centers)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.sh_coeffs = np.asarray(self.sh_coeffs, dtype=np.float64)
        if self.sh_coeffs.ndim != 3 or self.sh_coeffs.shape[:2] != (n, 3):
            raise ValueError(f"sh_coeffs must be (N, 3, B), got {self.sh_coeffs.shape}")
        degree = degree_from_basis(self.sh_coeffs.shape[2])
        if self.sh_degree < 0:
            self.sh_degree = degree
        elif self.sh_degree != degree:
            raise ValueError(f"sh_degree {self.sh_degree} does not match basis size {self.sh_coeffs.shape[2]}")
        if self.smoothing_state is not None:
            self.smoothing_state = np.asarray(self.smoothing_state, dtype=np.float64).reshape(-1)
            if len(self.smoothing_state) != n:
                raise ValueError("smoothing_state length must equal the number of Gaussians")
            if np.any(self.smoothing_state <= 0):
                raise ValueError("smoothing frequencies must be positive")

    def __len__(self) -> int:
        return len(self.centers)

    @classmethod
    def empty(cls, sh_degree: int = 0) -> "Scene":
        b = num_basis(sh_degree)
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3, b)))

    @classmethod
    def from_gaussians(cls, gaussians: Iterable[GaussianPrimitive]) -> "Scene":
        gaussians = list(gaussians)
        if not gaussians:
            return cls.empty()
        return cls(
            centers=np.stack([g.center for g in gaussians]),
            rotations=np.stack([g.rotation for g in gaussians]),
            log_scales=np.stack([g.log_scale for g in gaussians]),
            opacity_logits=np.array([g.opacity_logit for g in gaussians], dtype=np.float64),
            sh_coeffs=np.stack([g.sh_coeffs for g in gaussians]),
        )

    @property
    def gaussians(self) -> List[GaussianPrimitive]:
        return [self[i] for i in range(len(self))]

    def __getitem__(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            center=self.centers[i].copy(),
            rotation=self.rotations[i].copy(),
            log_scale=self.log_scales[i].copy(),
            opacity_logit=float(self.opacity_logits[i]),
            sh_coeffs=self.sh_coeffs[i].copy(),
        )

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def covariances(self) -> np.ndarray:
        return build_covariance(self.rotations, self.scales)

    def copy(self) -> "Scene":
        return Scene(
            self.centers.copy(),
            self.rotations.copy(),
            self.log_scales.copy(),
            self.opacity_logits.copy(),
            self.sh_coeffs.copy(),
            None if self.smoothing_state is None else self.smoothing_state.copy(),
            self.sh_degree,
        )

    def subset(self, index) -> "Scene":
        return Scene(
            self.centers[index],
            self.rotations[index],
            self.log_scales[index],
            self.opacity_logits[index],
            self.sh_coeffs[index],
            None if self.smoothing_state is None else self.smoothing_state[index],
            self.sh_degree,
        )

    def with_sh_degree(self, degree: int) -> "Scene":
        """Copy with the SH basis grown (zero padded) or truncated to ``degree``."""
        b_new = num_basis(degree)
        b_old = self.sh_coeffs.shape[2]
        sh = np.zeros((len(self), 3, b_new))
        keep = min(b_new, b_old)
        sh[:, :, :keep] = self.sh_coeffs[:, :, :keep]
        out = self.copy()
        out.sh_coeffs = sh
        out.sh_degree = degree
        return out

    def validate(self) -> None:
        """Raise if any stored parameter is non-finite or a quaternion is zero."""
        for name in ("centers", "rotations", "log_scales", "opacity_logits", "sh_coeffs"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise FloatingPointError(f"non-finite values in {name}")
        if np.any(np.linalg.norm(self.rotations, axis=1) == 0):
            raise InvalidRotationError("zero quaternion in scene")


def concat_scenes(scenes: List[Scene]) -> Scene:
    degrees = {s.sh_degree for s in scenes}
    if len(degrees) != 1:
        raise ValueError("cannot concatenate scenes with different SH degrees")
    states = [s.smoothing_state for s in scenes]
    smoothing = None if any(z is None for z in states) else np.concatenate(states)
    return Scene(
        np.concatenate([s.centers for s in scenes]),
        np.concatenate([s.rotations for s in scenes]),
        np.concatenate([s.log_scales for s in scenes]),
        np.concatenate([s.opacity_logits for s in scenes]),
        np.concatenate([s.sh_coeffs for s in scenes]),
        smoothing,
        degrees.pop(),
    )
