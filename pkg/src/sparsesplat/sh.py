"""Real spherical-harmonics color decoding (degrees 0 to 3).

Basis ordering and sign convention follow the 3DGS PLY ecosystem, so
coefficients read from third-party files decode to the same colors.
"""

from __future__ import annotations

import numpy as np

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

COLOR_OFFSET = 0.5
SUPPORTED_BASIS_SIZES = (1, 4, 9, 16)


class UnsupportedSHError(ValueError):
    pass


def num_basis(degree: int) -> int:
    if not 0 <= degree <= 3:
        raise UnsupportedSHError(f"SH degree must be in [0, 3], got {degree}")
    return (degree + 1) ** 2


def degree_from_basis(b: int) -> int:
    if b not in SUPPORTED_BASIS_SIZES:
        raise UnsupportedSHError(f"unsupported SH basis size {b}; expected one of {SUPPORTED_BASIS_SIZES}")
    return int(round(np.sqrt(b))) - 1


def sh_basis(dirs: np.ndarray, n_basis: int) -> np.ndarray:
    """Evaluate the first ``n_basis`` real SH functions.

    Args:
        dirs: (..., 3) unit directions.
        n_basis: 1, 4, 9 or 16.

    Returns:
        (..., n_basis) basis values.
    """
    degree_from_basis(n_basis)
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = np.empty(dirs.shape[:-1] + (n_basis,), dtype=np.float64)
    out[..., 0] = SH_C0
    if n_basis > 1:
        out[..., 1] = -SH_C1 * y
        out[..., 2] = SH_C1 * z
        out[..., 3] = -SH_C1 * x
    if n_basis > 4:
        xx, yy, zz = x * x, y * y, z * z
        out[..., 4] = SH_C2[0] * x * y
        out[..., 5] = SH_C2[1] * y * z
        out[..., 6] = SH_C2[2] * (2.0 * zz - xx - yy)
        out[..., 7] = SH_C2[3] * x * z
        out[..., 8] = SH_C2[4] * (xx - yy)
    if n_basis > 9:
        out[..., 9] = SH_C3[0] * y * (3.0 * xx - yy)
        out[..., 10] = SH_C3[1] * x * y * z
        out[..., 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
        out[..., 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        out[..., 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
        out[..., 14] = SH_C3[5] * z * (xx - yy)
        out[..., 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return out


def sh_basis_grad(dirs: np.ndarray, n_basis: int) -> np.ndarray:
    """Partial derivatives of each basis polynomial w.r.t. (x, y, z).

    Returns:
        (..., n_basis, 3) array. The polynomials are differentiated as
        functions on R^3; projecting onto the sphere is the caller's job.
    """
    degree_from_basis(n_basis)
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    g = np.zeros(dirs.shape[:-1] + (n_basis, 3), dtype=np.float64)
    if n_basis > 1:
        g[..., 1, 1] = -SH_C1
        g[..., 2, 2] = SH_C1
        g[..., 3, 0] = -SH_C1
    if n_basis > 4:
        xx, yy, zz = x * x, y * y, z * z
        g[..., 4, 0] = SH_C2[0] * y
        g[..., 4, 1] = SH_C2[0] * x
        g[..., 5, 1] = SH_C2[1] * z
        g[..., 5, 2] = SH_C2[1] * y
        g[..., 6, 0] = -2.0 * SH_C2[2] * x
        g[..., 6, 1] = -2.0 * SH_C2[2] * y
        g[..., 6, 2] = 4.0 * SH_C2[2] * z
        g[..., 7, 0] = SH_C2[3] * z
        g[..., 7, 2] = SH_C2[3] * x
        g[..., 8, 0] = 2.0 * SH_C2[4] * x
        g[..., 8, 1] = -2.0 * SH_C2[4] * y
    if n_basis > 9:
        g[..., 9, 0] = SH_C3[0] * 6.0 * x * y
        g[..., 9, 1] = SH_C3[0] * (3.0 * xx - 3.0 * yy)
        g[..., 10, 0] = SH_C3[1] * y * z
        g[..., 10, 1] = SH_C3[1] * x * z
        g[..., 10, 2] = SH_C3[1] * x * y
        g[..., 11, 0] = SH_C3[2] * (-2.0 * x * y)
        g[..., 11, 1] = SH_C3[2] * (4.0 * zz - xx - 3.0 * yy)
        g[..., 11, 2] = SH_C3[2] * 8.0 * y * z
        g[..., 12, 0] = SH_C3[3] * (-6.0 * x * z)
        g[..., 12, 1] = SH_C3[3] * (-6.0 * y * z)
        g[..., 12, 2] = SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)
        g[..., 13, 0] = SH_C3[4] * (4.0 * zz - 3.0 * xx - yy)
        g[..., 13, 1] = SH_C3[4] * (-2.0 * x * y)
        g[..., 13, 2] = SH_C3[4] * 8.0 * x * z
        g[..., 14, 0] = SH_C3[5] * 2.0 * x * z
        g[..., 14, 1] = SH_C3[5] * (-2.0 * y * z)
        g[..., 14, 2] = SH_C3[5] * (xx - yy)
        g[..., 15, 0] = SH_C3[6] * (3.0 * xx - 3.0 * yy)
        g[..., 15, 1] = SH_C3[6] * (-6.0 * x * y)
    return g


def eval_sh(sh_coeffs: np.ndarray, view_dir: np.ndarray) -> np.ndarray:
    """Decode RGB from SH coefficients.

    ``sh_coeffs`` is (3, B) for one Gaussian or (N, 3, B) for a batch;
    ``view_dir`` is (3,) or (N, 3). The result is
    ``max(0.5 + sum_b Y_b(dir) * coeff_b, 0)`` per channel.
    """
    sh_coeffs = np.asarray(sh_coeffs, dtype=np.float64)
    basis = sh_basis(view_dir, sh_coeffs.shape[-1])
    raw = np.einsum("...cb,...b->...c", sh_coeffs, basis) + COLOR_OFFSET
    return np.maximum(raw, 0.0)


def rgb_to_sh_dc(rgb: np.ndarray) -> np.ndarray:
    """DC coefficient that decodes to ``rgb`` under the 0.5 offset."""
    return (np.asarray(rgb, dtype=np.float64) - COLOR_OFFSET) / SH_C0


def sh_dc_to_rgb(dc: np.ndarray) -> np.ndarray:
    return np.asarray(dc, dtype=np.float64) * SH_C0 + COLOR_OFFSET
