"""Independent reference implementations used by the tests.

Nothing here calls into the package's numerical code paths: projection uses
scipy's rotation utilities and explicit matrices, SH comes from
``scipy.special``, neighbor searches are exhaustive, and compositing loops
over splats without tiling.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from fractions import Fraction
from typing import List, Sequence

import numpy as np
from scipy.signal import correlate2d
from scipy.spatial.transform import Rotation
from scipy.special import sph_harm_y

SIGMA_MAX = 0.999
T_EPS = 1e-4
DILATION = 0.3


# --- spherical harmonics -----------------------------------------------------


def real_sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH in the 3DGS ordering and signs, derived from scipy's complex SH.

    Standard real SH (no Condon-Shortley phase) times ``(-1)^m``.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    theta = np.arccos(np.clip(dirs[..., 2], -1.0, 1.0))
    phi = np.arctan2(dirs[..., 1], dirs[..., 0])
    cols = []
    for l in range(degree + 1):
        for m in range(-l, l + 1):
            Y = sph_harm_y(l, abs(m), theta, phi)
            if m < 0:
                v = np.sqrt(2.0) * (-1) ** m * Y.imag
            elif m == 0:
                v = Y.real
            else:
                v = np.sqrt(2.0) * (-1) ** m * Y.real
            cols.append((-1) ** m * v)
    return np.stack(cols, axis=-1)


# --- projection ----------------------------------------------------------------


@dataclass
class RefSplat:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    opacity: float


def homogeneous_project(point, R, T, focal, size, principal=None):
    """World point -> (camera point, screen point) via a 4x4 extrinsic and 3x3 intrinsic matrix."""
    E = np.eye(4)
    E[:3, :3] = R
    E[:3, 3] = T
    e = (E @ np.append(point, 1.0))[:3]
    cx, cy = principal if principal is not None else (size[0] / 2.0, size[1] / 2.0)
    K = np.array([[focal[0], 0, cx], [0, focal[1], cy], [0, 0, 1.0]])
    h = K @ e
    return e, h[:2] / h[2]


def project_reference(centers, rotations, log_scales, opacity_logits, sh_coeffs, R, T, focal, size,
                      zeta=None, s_filter=0.0, margin=0.15) -> List[RefSplat]:
    """One loop iteration per Gaussian with explicit 3x3 algebra."""
    W, H = size
    out = []
    for n in range(len(centers)):
        e = R @ centers[n] + T
        if e[2] <= 1e-4:
            continue
        q = rotations[n] / np.linalg.norm(rotations[n])
        Rn = Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()
        s2 = np.exp(2 * log_scales[n])
        cov = Rn @ np.diag(s2) @ Rn.T
        alpha = 1.0 / (1.0 + np.exp(-opacity_logits[n]))
        if zeta is not None and s_filter > 0:
            cov_f = cov + (s_filter / zeta[n] ** 2) * np.eye(3)
            alpha *= np.sqrt(np.linalg.det(cov) / np.linalg.det(cov_f))
            cov = cov_f
        x, y, z = e
        J = np.array([[focal[0] / z, 0, -focal[0] * x / z**2], [0, focal[1] / z, -focal[1] * y / z**2]])
        cov2d = J @ R @ cov @ R.T @ J.T + DILATION * np.eye(2)
        mean2d = np.array([focal[0] * x / z + W / 2, focal[1] * y / z + H / 2])
        ext = 3 * np.sqrt(np.diag(cov2d))
        lo, hi = mean2d - ext, mean2d + ext
        if hi[0] < -margin * W or lo[0] > (1 + margin) * W or hi[1] < -margin * H or lo[1] > (1 + margin) * H:
            continue
        cam_center = -R.T @ T
        d = centers[n] - cam_center
        d /= np.linalg.norm(d)
        degree = int(round(np.sqrt(sh_coeffs.shape[2]))) - 1
        color = np.maximum(sh_coeffs[n] @ real_sh_basis(d, degree) + 0.5, 0.0)
        out.append(RefSplat(mean2d, cov2d, float(z), color, float(alpha)))
    return out


# --- compositing ---------------------------------------------------------------


def composite_reference(splats: Sequence, W: int, H: int, background=(0.0, 0.0, 0.0)):
    """Every splat against every pixel in global depth order, no tiling.

    A splat contributes to a pixel while the transmittance in front of it is
    at least ``T_EPS``; support is the 3-sigma ellipse.
    Returns (color, depth, alpha, count).
    """
    bg = np.asarray(background, dtype=np.float64)
    jj, ii = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    T = np.ones((H, W))
    C = np.zeros((H, W, 3))
    D = np.zeros((H, W))
    n = np.zeros((H, W), dtype=np.int64)
    for s in sorted(splats, key=lambda s: s.depth):
        inv = np.linalg.inv(s.cov2d)
        dx = jj - s.mean2d[0]
        dy = ii - s.mean2d[1]
        maha = inv[0, 0] * dx * dx + 2.0 * inv[0, 1] * dx * dy + inv[1, 1] * dy * dy
        g = np.where(maha <= 9.0, np.exp(-0.5 * maha), 0.0)
        sig = np.minimum(s.opacity * g, SIGMA_MAX)
        live = T >= T_EPS
        C += np.where(live[..., None], (sig * T)[..., None] * s.color, 0.0)
        D += np.where(live, sig * T * s.depth, 0.0)
        n += live & (sig > 0)
        T = np.where(live, T * (1.0 - sig), T)
    C += T[..., None] * bg
    return C, D, 1.0 - T, n


def composite_back_to_front(splats: Sequence, W: int, H: int, background=(0.0, 0.0, 0.0)):
    """Painter's algorithm: C <- sigma c + (1 - sigma) C from the farthest splat.

    Matches front-to-back compositing whenever transmittance never falls
    below the cutoff. Depth is accumulated the same way starting from 0.
    """
    jj, ii = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    C = np.broadcast_to(np.asarray(background, dtype=np.float64), (H, W, 3)).copy()
    D = np.zeros((H, W))
    for s in sorted(splats, key=lambda s: -s.depth):
        inv = np.linalg.inv(s.cov2d)
        d = np.stack([jj - s.mean2d[0], ii - s.mean2d[1]], axis=-1)
        maha = np.einsum("hwi,ij,hwj->hw", d, inv, d)
        sig = np.minimum(s.opacity * np.where(maha <= 9.0, np.exp(-0.5 * maha), 0.0), SIGMA_MAX)
        C = sig[..., None] * s.color + (1.0 - sig[..., None]) * C
        D = sig * s.depth + (1.0 - sig) * D
    return C, D


# --- neighbors and densities -----------------------------------------------------


def knn_bruteforce(queries: np.ndarray, reference: np.ndarray, k: int):
    d2 = ((queries[:, None, :] - reference[None, :, :]) ** 2).sum(-1)
    idx = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return np.sqrt(np.take_along_axis(d2, idx, axis=1)), idx


def kde_oracle(queries, reference, k, sigma):
    dist, _ = knn_bruteforce(queries, reference, min(k, len(reference)))
    return np.exp(-(dist**2) / (2.0 * sigma**2)).sum(axis=1)


def mean_3nn_distance(points: np.ndarray) -> np.ndarray:
    """Mean distance to the 3 nearest other points, by exhaustive search."""
    out = np.empty(len(points))
    for i, p in enumerate(points):
        d = np.sort(np.linalg.norm(points - p, axis=1))[1:4]
        out[i] = d.mean()
    return out


# --- statistics and metrics -------------------------------------------------------


def quantile_sorted(values: np.ndarray, q: float) -> float:
    """Linear interpolation between order statistics of the sorted sample."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    pos = q * (len(v) - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, len(v) - 1)
    return float(v[lo] + (pos - lo) * (v[hi] - v[lo]))


def psnr_oracle(a, b) -> float:
    total = 0.0
    flat_a, flat_b = np.ravel(a), np.ravel(b)
    for x, y in zip(flat_a, flat_b):
        total += (float(x) - float(y)) ** 2
    return 10.0 * np.log10(len(flat_a) / total)


def ssim_oracle(a, b, size=11, sigma=1.5, k1=0.01, k2=0.03) -> float:
    """SSIM with a full 2D Gaussian window and direct 2D correlation per channel."""
    a = np.atleast_3d(np.asarray(a, dtype=np.float64))
    b = np.atleast_3d(np.asarray(b, dtype=np.float64))
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x[:, None] ** 2 + x[None, :] ** 2) / (2 * sigma**2))
    g /= g.sum()
    c1, c2 = k1**2, k2**2
    vals = []
    for ch in range(a.shape[2]):
        A, B = a[..., ch], b[..., ch]
        f = lambda im: correlate2d(im, g, mode="valid")  # noqa: E731
        mu_a, mu_b = f(A), f(B)
        va = f(A * A) - mu_a**2
        vb = f(B * B) - mu_b**2
        cov = f(A * B) - mu_a * mu_b
        s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (va + vb + c2))
        vals.append(s.mean())
    return float(np.mean(vals))


# --- smoothing ----------------------------------------------------------------------


def zeta_oracle(centers, cameras, alpha_margin, fallback):
    """Per-Gaussian, per-camera loop of the frequency bound."""
    zeta = np.full(len(centers), -np.inf)
    count = np.zeros(len(centers), dtype=int)
    for n, c in enumerate(centers):
        for cam in cameras:
            e, s = homogeneous_project(c, cam.rotation, cam.translation, cam.focal, cam.size, cam.principal)
            if e[2] <= 1e-4:
                continue
            W, H = cam.size
            if not (-alpha_margin * W <= s[0] <= (1 + alpha_margin) * W):
                continue
            if not (-alpha_margin * H <= s[1] <= (1 + alpha_margin) * H):
                continue
            zeta[n] = max(zeta[n], max(cam.focal) / e[2])
            count[n] += 1
    zeta[count == 0] = fallback
    return zeta, count


def shifted_is_psd_exact(matrix: np.ndarray, shift: float) -> bool:
    """Whether ``matrix - shift * I`` is PSD, decided in exact rational arithmetic.

    A symmetric matrix is PSD iff every principal minor is non-negative, so
    ``lambda_min(matrix) >= shift`` holds exactly when this returns True.
    """
    n = len(matrix)
    m = [[Fraction(float(matrix[i][j])) - (Fraction(float(shift)) if i == j else 0) for j in range(n)]
         for i in range(n)]

    def det_sub(rows, cols):
        if len(rows) == 1:
            return m[rows[0]][cols[0]]
        return sum((-1) ** k * m[rows[0]][c] * det_sub(rows[1:], cols[:k] + cols[k + 1:]) for k, c in enumerate(cols))

    return all(det_sub(list(idx), list(idx)) >= 0 for r in range(1, n + 1) for idx in itertools.combinations(range(n), r))


# --- gradients ----------------------------------------------------------------------


def central_difference(f, x: np.ndarray, index, h: float) -> float:
    xp = x.copy()
    xm = x.copy()
    xp[index] += h
    xm[index] -= h
    return (f(xp) - f(xm)) / (2.0 * h)
