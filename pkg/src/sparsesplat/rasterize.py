"""Tile-based differentiable Gaussian rasterizer (color + depth).

Forward: Gaussians are filtered (optional 3D smoothing), projected to
screen-space ellipses, globally depth sorted, binned into 16x16 tiles and
alpha-composited front to back. Projection and binning are vectorized
numpy; the per-pixel compositing loops are compiled (see ``_kernels``).

Backward: each pixel replays its forward pass and reverse-mode
gradients are pushed through compositing, the 2D Gaussian, the EWA
projection, the smoothing filter, the covariance parameterization and the
SH color decoding.

Kernel support is the 3-sigma ellipse: a splat contributes nothing to
pixels whose Mahalanobis distance exceeds 3. Compositing stops once the
transmittance in front of a splat falls below ``T_EPS``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .camera import NEAR_EPS, CameraModel
from .scene import Scene, quaternion_to_matrix, sigmoid
from .sh import COLOR_OFFSET, sh_basis, sh_basis_grad
from .smoothing import filter_variance
from . import _kernels
from ._kernels import CUTOFF_POWER, SIGMA_MAX, T_EPS, TILE  # noqa: F401

DILATION = 0.3


@dataclass
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    opacity: float
    source_index: int


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W)
    alpha: np.ndarray  # (H, W)
    per_pixel_contrib_count: np.ndarray  # (H, W) int


@dataclass
class SceneGradients:
    """Gradients with the same layout as the :class:`Scene` parameters."""

    centers: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray
    mean2d: np.ndarray  # (N, 2) screen-space gradient in NDC units, zero when culled
    visible: np.ndarray  # (N,) bool

    @classmethod
    def zeros_like(cls, scene: Scene) -> "SceneGradients":
        n = len(scene)
        return cls(
            np.zeros_like(scene.centers),
            np.zeros_like(scene.rotations),
            np.zeros_like(scene.log_scales),
            np.zeros_like(scene.opacity_logits),
            np.zeros_like(scene.sh_coeffs),
            np.zeros((n, 2)),
            np.zeros(n, dtype=bool),
        )

    def __iadd__(self, other: "SceneGradients") -> "SceneGradients":
        self.centers += other.centers
        self.rotations += other.rotations
        self.log_scales += other.log_scales
        self.opacity_logits += other.opacity_logits
        self.sh_coeffs += other.sh_coeffs
        self.mean2d += other.mean2d
        self.visible |= other.visible
        return self

    def as_dict(self) -> dict:
        return {
            "centers": self.centers,
            "rotations": self.rotations,
            "log_scales": self.log_scales,
            "opacity_logits": self.opacity_logits,
            "sh_coeffs": self.sh_coeffs,
        }


@dataclass
class _Projected:
    """Visible splats in global front-to-back order plus backward intermediates."""

    index: np.ndarray  # (K,) source Gaussian indices
    mean2d: np.ndarray  # (K, 2)
    cov2d: np.ndarray  # (K, 2, 2)
    conic: np.ndarray  # (K, 3) a, b, c of the inverse 2D covariance
    depth: np.ndarray  # (K,)
    color: np.ndarray  # (K, 3)
    opacity: np.ndarray  # (K,)
    extent: np.ndarray  # (K, 2) half-widths of the 3-sigma ellipse bounding box
    # intermediates
    t: np.ndarray
    J: np.ndarray
    M: np.ndarray
    cov3d: np.ndarray
    R: np.ndarray
    scale2: np.ndarray
    var: np.ndarray
    factor: np.ndarray
    sig: np.ndarray
    dirs: np.ndarray
    dist: np.ndarray
    color_pos: np.ndarray


def _filter_strength(scene: Scene, filter_strength: float) -> np.ndarray:
    if scene.smoothing_state is None or filter_strength == 0:
        return np.zeros(len(scene))
    return filter_variance(scene.smoothing_state, filter_strength)


def _preprocess(scene: Scene, cam: CameraModel, filter_strength: float, margin: float) -> _Projected:
    fx, fy = cam.focal
    cx, cy = cam.principal
    W, H = cam.size
    Rc = cam.rotation

    t_all = scene.centers @ Rc.T + cam.translation
    front = t_all[:, 2] > NEAR_EPS
    idx = np.nonzero(front)[0]

    t = t_all[idx]
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    R = quaternion_to_matrix(scene.rotations[idx])
    scale2 = np.exp(2.0 * scene.log_scales[idx])
    var = _filter_strength(scene, filter_strength)[idx]
    scale2_f = scale2 + var[:, None]
    cov3d = np.einsum("kij,kj,klj->kil", R, scale2_f, R)
    factor = np.sqrt(np.prod(scale2 / scale2_f, axis=1))
    sig = sigmoid(scene.opacity_logits[idx])
    opacity = sig * factor

    J = np.zeros((len(idx), 2, 3))
    J[:, 0, 0] = fx / tz
    J[:, 0, 2] = -fx * tx / tz**2
    J[:, 1, 1] = fy / tz
    J[:, 1, 2] = -fy * ty / tz**2
    M = J @ Rc
    cov2d = np.einsum("kij,kjl,kml->kim", M, cov3d, M)
    cov2d[:, 0, 0] += DILATION
    cov2d[:, 1, 1] += DILATION
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    conic = np.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=1)
    mean2d = np.stack([fx * tx / tz + cx, fy * ty / tz + cy], axis=1)
    extent = 3.0 * np.sqrt(np.stack([cov2d[:, 0, 0], cov2d[:, 1, 1]], axis=1))

    cam_pos = cam.center
    v = scene.centers[idx] - cam_pos
    dist = np.linalg.norm(v, axis=1)
    dirs = v / dist[:, None]
    sh = scene.sh_coeffs[idx]
    raw = np.einsum("kcb,kb->kc", sh, sh_basis(dirs, sh.shape[2])) + COLOR_OFFSET
    color_pos = raw > 0
    color = np.where(color_pos, raw, 0.0)

    lo = mean2d - extent
    hi = mean2d + extent
    keep = (hi[:, 0] >= -margin * W) & (lo[:, 0] <= (1 + margin) * W)
    keep &= (hi[:, 1] >= -margin * H) & (lo[:, 1] <= (1 + margin) * H)

    order = np.nonzero(keep)[0]
    order = order[np.argsort(tz[order], kind="stable")]

    return _Projected(
        index=idx[order],
        mean2d=mean2d[order],
        cov2d=cov2d[order],
        conic=conic[order],
        depth=tz[order],
        color=color[order],
        opacity=opacity[order],
        extent=extent[order],
        t=t[order],
        J=J[order],
        M=M[order],
        cov3d=cov3d[order],
        R=R[order],
        scale2=scale2[order],
        var=var[order],
        factor=factor[order],
        sig=sig[order],
        dirs=dirs[order],
        dist=dist[order],
        color_pos=color_pos[order],
    )


def project_gaussians(scene: Scene, cam: CameraModel, filter_strength: float = 0.2, margin: float = 0.15) -> list:
    """All visible splats of ``scene`` in front-to-back order."""
    p = _preprocess(scene, cam, filter_strength, margin)
    return [
        Splat2D(p.mean2d[k], p.cov2d[k], float(p.depth[k]), p.color[k], float(p.opacity[k]), int(p.index[k]))
        for k in range(len(p.index))
    ]


def project_gaussian(g, cam: CameraModel, zeta: Optional[float] = None, filter_strength: float = 0.2,
                     margin: float = 0.15) -> Optional[Splat2D]:
    """Project one :class:`GaussianPrimitive`; ``None`` when culled."""
    scene = Scene.from_gaussians([g])
    if zeta is not None:
        scene.smoothing_state = np.array([zeta], dtype=np.float64)
    splats = project_gaussians(scene, cam, filter_strength, margin)
    return splats[0] if splats else None


@dataclass
class _TileBins:
    n_tiles_x: int
    n_tiles_y: int
    tile_ids: np.ndarray  # tiles that have at least one splat
    starts: np.ndarray
    counts: np.ndarray
    splats: np.ndarray  # splat (position in _Projected order) per pair, grouped by tile


def _bin_tiles(p: _Projected, W: int, H: int) -> _TileBins:
    ntx = (W + TILE - 1) // TILE
    nty = (H + TILE - 1) // TILE
    lo = p.mean2d - p.extent
    hi = p.mean2d + p.extent
    # pixel centers at j + 0.5
    jx0 = np.maximum(np.ceil(lo[:, 0] - 0.5), 0)
    jx1 = np.minimum(np.floor(hi[:, 0] - 0.5), W - 1)
    jy0 = np.maximum(np.ceil(lo[:, 1] - 0.5), 0)
    jy1 = np.minimum(np.floor(hi[:, 1] - 0.5), H - 1)
    ok = (jx0 <= jx1) & (jy0 <= jy1)
    k_ok = np.nonzero(ok)[0]
    tx0 = (jx0[ok] // TILE).astype(np.int64)
    tx1 = (jx1[ok] // TILE).astype(np.int64)
    ty0 = (jy0[ok] // TILE).astype(np.int64)
    ty1 = (jy1[ok] // TILE).astype(np.int64)
    nx = tx1 - tx0 + 1
    ny = ty1 - ty0 + 1
    n_pairs = nx * ny
    total = int(n_pairs.sum())
    if total == 0:
        empty = np.zeros(0, dtype=np.int64)
        return _TileBins(ntx, nty, empty, empty, empty, empty)
    owner = np.repeat(np.arange(len(k_ok)), n_pairs)
    first = np.repeat(np.cumsum(n_pairs) - n_pairs, n_pairs)
    local = np.arange(total) - first
    tx = tx0[owner] + local % nx[owner]
    ty = ty0[owner] + local // nx[owner]
    tile = ty * ntx + tx
    # stable sort keeps the global depth order within every tile
    order = np.argsort(tile, kind="stable")
    tile = tile[order]
    splat = k_ok[owner[order]]
    tile_ids, starts, counts = np.unique(tile, return_index=True, return_counts=True)
    return _TileBins(ntx, nty, tile_ids, starts, counts, splat)


def render(scene: Scene, cam: CameraModel, background=(0.0, 0.0, 0.0), filter_strength: float = 0.2,
           margin: float = 0.15) -> RenderOutput:
    """Render color, depth and accumulated alpha for ``cam``.

    ``filter_strength`` is the smoothing strength ``s``; it only applies
    when ``scene.smoothing_state`` holds per-Gaussian frequencies.
    """
    W, H = cam.size
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    color = np.empty((H, W, 3))
    color[:] = bg
    depth = np.zeros((H, W))
    T = np.ones((H, W))
    count = np.zeros((H, W), dtype=np.int64)
    if len(scene) == 0:
        return RenderOutput(color, depth, 1.0 - T, count)

    p = _preprocess(scene, cam, filter_strength, margin)
    bins = _bin_tiles(p, W, H)
    if len(bins.tile_ids):
        _kernels.composite_forward(p.mean2d, p.conic, p.opacity, p.color, p.depth, bins.tile_ids, bins.starts,
                                   bins.counts, bins.splats, bins.n_tiles_x, W, H, bg, color, depth, T, count)
    return RenderOutput(color, depth, 1.0 - T, count)


def render_backward(scene: Scene, cam: CameraModel, grad_color: np.ndarray, grad_depth: Optional[np.ndarray] = None,
                    background=(0.0, 0.0, 0.0), filter_strength: float = 0.2, margin: float = 0.15) -> SceneGradients:
    """Exact gradients of ``sum(grad_color * color) + sum(grad_depth * depth)``.

    The smoothing frequencies in ``scene.smoothing_state`` are treated as
    constants (they are refreshed outside the optimization step).
    """
    W, H = cam.size
    grad_color = np.ascontiguousarray(grad_color, dtype=np.float64)
    if grad_color.shape != (H, W, 3):
        raise ValueError(f"grad_color shape {grad_color.shape} does not match image ({H}, {W}, 3)")
    if grad_depth is None:
        grad_depth = np.zeros((H, W))
    grad_depth = np.ascontiguousarray(grad_depth, dtype=np.float64)
    if grad_depth.shape != (H, W):
        raise ValueError(f"grad_depth shape {grad_depth.shape} does not match image ({H}, {W})")
    bg = np.asarray(background, dtype=np.float64).reshape(3)

    out = SceneGradients.zeros_like(scene)
    if len(scene) == 0:
        return out
    p = _preprocess(scene, cam, filter_strength, margin)
    K = len(p.index)
    if K == 0:
        return out
    bins = _bin_tiles(p, W, H)
    pair_grad = np.zeros((len(bins.splats), 10))
    if len(bins.tile_ids):
        _kernels.composite_backward(p.mean2d, p.conic, p.opacity, p.color, p.depth, bins.tile_ids, bins.starts,
                                    bins.counts, bins.splats, bins.n_tiles_x, W, H, bg, grad_color, grad_depth,
                                    pair_grad)
    # fixed-order reduction over (tile, splat) pairs
    per_splat = np.stack([np.bincount(bins.splats, weights=pair_grad[:, j], minlength=K) for j in range(10)], axis=1)
    d_opacity = per_splat[:, 0]
    d_mean = per_splat[:, 1:3]
    d_conic = per_splat[:, 3:6]
    d_color = per_splat[:, 6:9]
    d_depth = per_splat[:, 9]
    _backprop_splats(scene, cam, p, d_color, d_depth, d_opacity, d_mean, d_conic, out)
    return out


def _backprop_splats(scene, cam, p, d_color, d_depth, d_opacity, d_mean, d_conic, out: SceneGradients):
    fx, fy = cam.focal
    Rc = cam.rotation
    idx = p.index
    tx, ty, tz = p.t[:, 0], p.t[:, 1], p.t[:, 2]

    # conic -> 2D covariance
    a, b, c = p.conic[:, 0], p.conic[:, 1], p.conic[:, 2]
    Q = np.stack([np.stack([a, b], -1), np.stack([b, c], -1)], -2)
    GQ = np.stack(
        [np.stack([d_conic[:, 0], 0.5 * d_conic[:, 1]], -1), np.stack([0.5 * d_conic[:, 1], d_conic[:, 2]], -1)], -2
    )
    d_cov2d = -Q @ GQ @ Q

    # 2D covariance -> filtered 3D covariance and the projection matrix M = J Rc
    M = p.M
    d_cov3d = np.einsum("kji,kjl,klm->kim", M, d_cov2d, M)
    d_M = 2.0 * d_cov2d @ M @ p.cov3d
    d_J = d_M @ Rc.T

    d_t = np.zeros_like(p.t)
    d_t[:, 0] = d_J[:, 0, 2] * (-fx / tz**2) + d_mean[:, 0] * fx / tz
    d_t[:, 1] = d_J[:, 1, 2] * (-fy / tz**2) + d_mean[:, 1] * fy / tz
    d_t[:, 2] = (
        d_J[:, 0, 0] * (-fx / tz**2)
        + d_J[:, 0, 2] * (2.0 * fx * tx / tz**3)
        + d_J[:, 1, 1] * (-fy / tz**2)
        + d_J[:, 1, 2] * (2.0 * fy * ty / tz**3)
        - d_mean[:, 0] * fx * tx / tz**2
        - d_mean[:, 1] * fy * ty / tz**2
        + d_depth
    )
    d_center = d_t @ Rc

    # SH color
    sh = scene.sh_coeffs[idx]
    nb = sh.shape[2]
    d_rgb = np.where(p.color_pos, d_color, 0.0)
    basis = sh_basis(p.dirs, nb)
    d_sh = d_rgb[:, :, None] * basis[:, None, :]
    if nb > 1:
        d_dir = np.einsum("kc,kcb,kbx->kx", d_rgb, sh, sh_basis_grad(p.dirs, nb))
        d_dir -= p.dirs * np.sum(p.dirs * d_dir, axis=1, keepdims=True)
        d_center += d_dir / p.dist[:, None]

    # opacity and smoothing amplitude factor
    d_logit = d_opacity * p.factor * p.sig * (1.0 - p.sig)
    d_factor = d_opacity * p.sig
    scale2_f = p.scale2 + p.var[:, None]
    d_log_scale = (d_factor * p.factor)[:, None] * (p.var[:, None] / scale2_f)

    # filtered covariance R diag(scale2_f) R^T -> rotation, scale
    Gs = 0.5 * (d_cov3d + np.swapaxes(d_cov3d, 1, 2))
    R = p.R
    d_scale2_f = np.einsum("kji,kjl,kli->ki", R, Gs, R)
    d_log_scale += d_scale2_f * 2.0 * p.scale2
    d_R = 2.0 * Gs @ R * scale2_f[:, None, :]
    d_q = _quat_backward(scene.rotations[idx], d_R)

    out.centers[idx] += d_center
    out.rotations[idx] += d_q
    out.log_scales[idx] += d_log_scale
    out.opacity_logits[idx] += d_logit
    out.sh_coeffs[idx] += d_sh
    W, H = cam.size
    out.mean2d[idx] += d_mean * np.array([0.5 * W, 0.5 * H])
    out.visible[idx] = True


def _quat_backward(q_raw: np.ndarray, d_R: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the raw (unnormalized) quaternion given dL/dR."""
    norm = np.linalg.norm(q_raw, axis=1, keepdims=True)
    q = q_raw / norm
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = d_R
    dw = 2.0 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    dx = 2.0 * (
        y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2.0 * x * g[:, 1, 1] - w * g[:, 1, 2]
        + z * g[:, 2, 0] + w * g[:, 2, 1] - 2.0 * x * g[:, 2, 2]
    )
    dy = 2.0 * (
        -2.0 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0] + z * g[:, 1, 2]
        - w * g[:, 2, 0] + z * g[:, 2, 1] - 2.0 * y * g[:, 2, 2]
    )
    dz = 2.0 * (
        -2.0 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0] - 2.0 * z * g[:, 1, 1]
        + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1]
    )
    dq = np.stack([dw, dx, dy, dz], axis=1)
    return (dq - q * np.sum(q * dq, axis=1, keepdims=True)) / norm

