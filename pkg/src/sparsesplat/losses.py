"""Training objectives for known and novel views.

Every loss returns its value together with the gradient of that value with
respect to the rendered input, so that the trainer can hand image-space
gradients straight to :func:`sparsesplat.rasterize.render_backward`.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Tuple

import numpy as np

from .metrics import ssim_with_grad
from .rasterize import RenderOutput

logger = logging.getLogger(__name__)


@dataclass
class MaskConfig:
    q_base: float = 0.9
    delta_q: float = 0.08

    def __post_init__(self):
        if not 0.0 <= self.q_base <= 1.0 or self.delta_q < 0 or self.q_base + self.delta_q > 1.0 + 1e-12:
            raise ValueError(f"invalid mask config q_base={self.q_base} delta_q={self.delta_q}")


@dataclass
class LossWeights:
    lambda_depth: float = 0.1
    lambda_sds: float = 0.05
    lambda_dgpp: float = 0.5
    lambda_1: float = 1.0
    lambda_2: float = 0.5
    dssim_mix: float = 0.2

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"{k} must be non-negative")
        if self.dssim_mix > 1:
            raise ValueError("dssim_mix must be in [0, 1]")


@dataclass
class LossReport:
    rgb: float = 0.0
    depth: float = 0.0
    dgpp: float = 0.0
    sds_norm: float = 0.0
    total: float = 0.0
    sds_skipped: bool = False
    weights: dict = field(default_factory=dict)

    def as_row(self) -> dict:
        return {"rgb": self.rgb, "depth": self.depth, "dgpp": self.dgpp, "sds_norm": self.sds_norm, "total": self.total}


def _same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def rgb_loss(rendered: np.ndarray, reference: np.ndarray, dssim_mix: float = 0.2) -> Tuple[float, np.ndarray]:
    """``(1-m) * L1 + m * (1 - SSIM) / 2`` and its gradient w.r.t. ``rendered``."""
    rendered, reference = _same_shape(rendered, reference)
    diff = rendered - reference
    l1 = float(np.abs(diff).mean())
    grad = (1.0 - dssim_mix) * np.sign(diff) / diff.size
    value = (1.0 - dssim_mix) * l1
    if dssim_mix > 0:
        s, ds = ssim_with_grad(rendered, reference)
        value += dssim_mix * (1.0 - s) / 2.0
        grad = grad - 0.5 * dssim_mix * ds
    return value, grad


def normalize_rendered_depth(depth: np.ndarray):
    """Per-image min-max normalization of a rendered depth map.

    Returns the normalized map and a context for :func:`normalize_rendered_depth_backward`.
    """
    depth = np.asarray(depth, dtype=np.float64)
    lo_i = int(np.argmin(depth))
    hi_i = int(np.argmax(depth))
    lo = depth.flat[lo_i]
    hi = depth.flat[hi_i]
    span = hi - lo
    if span <= 0:
        return np.zeros_like(depth), (depth, lo_i, hi_i, 0.0)
    return (depth - lo) / span, (depth, lo_i, hi_i, span)


def normalize_rendered_depth_backward(grad: np.ndarray, ctx) -> np.ndarray:
    depth, lo_i, hi_i, span = ctx
    if span <= 0:
        return np.zeros_like(depth)
    lo = depth.flat[lo_i]
    hi = depth.flat[hi_i]
    out = grad / span
    out.flat[lo_i] += np.sum(grad * (depth - hi)) / span**2
    out.flat[hi_i] -= np.sum(grad * (depth - lo)) / span**2
    return out


def linear_quantile(values: np.ndarray, q: float) -> float:
    """Quantile by linear interpolation between order statistics.

    Uses ``v[lo] + frac * (v[hi] - v[lo])`` at position ``q * (n - 1)``.
    numpy's linear method evaluates the same interpolation in a different
    arithmetic form, which can differ in the last bit.
    """
    flat = np.asarray(values, dtype=np.float64).ravel()
    pos = q * (flat.size - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, flat.size - 1)
    part = np.partition(flat, (lo, hi))
    return float(part[lo] + (pos - lo) * (part[hi] - part[lo]))


def compute_depth_mask(depth: np.ndarray, cfg: MaskConfig):
    """Keep pixels nearer than an adaptive quantile of the reference depth.

    Returns:
        ``(mask, threshold, q_f)`` where ``q_f = q_b + std/(std+mean) * dq``
        and ``mask = depth <= quantile(depth, q_f)``. Statistics skip NaN
        pixels, which are always masked out.
    """
    depth = np.asarray(getattr(depth, "values", depth), dtype=np.float64)
    if depth.size == 0:
        raise ValueError("empty depth map")
    valid = depth[~np.isnan(depth)]
    if valid.size == 0:
        raise ValueError("depth map is entirely NaN")
    mean = float(valid.mean())
    std = float(valid.std())
    ratio = std / (std + mean) if std + mean > 0 else 0.0
    q_f = float(np.clip(cfg.q_base + ratio * cfg.delta_q, 0.0, 1.0))
    threshold = linear_quantile(valid, q_f)
    # NaN pixels compare False and so are masked out
    return depth <= threshold, threshold, q_f


def masked_depth_loss(rendered: np.ndarray, reference: np.ndarray, mask: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean absolute depth error over masked-in pixels."""
    rendered, reference = _same_shape(rendered, reference)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != rendered.shape:
        raise ValueError(f"mask shape {mask.shape} does not match depth {rendered.shape}")
    n = int(mask.sum())
    if n == 0:
        logger.warning("depth mask selects no pixels; depth loss is zero")
        return 0.0, np.zeros_like(rendered)
    diff = np.where(mask, rendered - reference, 0.0)
    return float(np.abs(diff).sum() / n), np.sign(diff) / n


def _axis_gradient(f: np.ndarray, axis: int) -> np.ndarray:
    """Central differences inside, one-sided differences at the borders."""
    f = np.moveaxis(f, axis, 0)
    g = np.zeros_like(f)
    if f.shape[0] >= 2:
        g[0] = f[1] - f[0]
        g[-1] = f[-1] - f[-2]
        g[1:-1] = 0.5 * (f[2:] - f[:-2])
    return np.moveaxis(g, 0, axis)


def _axis_gradient_adjoint(r: np.ndarray, axis: int) -> np.ndarray:
    r = np.moveaxis(r, axis, 0)
    a = np.zeros_like(r)
    n = r.shape[0]
    if n >= 2:
        a[1] += r[0]
        a[0] -= r[0]
        a[-1] += r[-1]
        a[-2] -= r[-1]
        a[2:] += 0.5 * r[1:-1]
        a[:-2] -= 0.5 * r[1:-1]
    return np.moveaxis(a, 0, axis)


def dgpp_loss(rendered_masked: np.ndarray, reference_masked: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean L1 distance between the depth gradient fields of two (masked) maps."""
    rendered_masked, reference_masked = _same_shape(rendered_masked, reference_masked)
    n = rendered_masked.size
    value = 0.0
    grad = np.zeros_like(rendered_masked)
    for axis in (0, 1):
        delta = _axis_gradient(rendered_masked, axis) - _axis_gradient(reference_masked, axis)
        value += float(np.abs(delta).sum())
        grad += _axis_gradient_adjoint(np.sign(delta), axis)
    return value / n, grad / n


def known_view_loss(render_out: RenderOutput, ref_image: np.ndarray, ref_depth: Optional[np.ndarray],
                    weights: LossWeights, mask_cfg: MaskConfig):
    """RGB + masked depth + DGPP for one training view.

    Returns:
        ``(report, grad_color, grad_depth)``; gradients are w.r.t. the raw
        rendered color and (un-normalized) rendered depth.
    """
    report = LossReport(weights=asdict(weights))
    report.rgb, grad_color = rgb_loss(render_out.color, ref_image, weights.dssim_mix)
    grad_depth = np.zeros_like(render_out.depth)
    total = report.rgb
    if ref_depth is not None and weights.lambda_depth > 0:
        ref = np.asarray(getattr(ref_depth, "values", ref_depth), dtype=np.float64)
        mask, _, _ = compute_depth_mask(ref, mask_cfg)
        d_norm, ctx = normalize_rendered_depth(render_out.depth)
        report.depth, g_depth = masked_depth_loss(d_norm, ref, mask)
        g_norm = g_depth
        if weights.lambda_dgpp > 0:
            report.dgpp, g_dgpp = dgpp_loss(d_norm * mask, np.where(mask, ref, 0.0))
            g_norm = g_norm + weights.lambda_dgpp * g_dgpp * mask
        grad_depth = weights.lambda_depth * normalize_rendered_depth_backward(g_norm, ctx)
        total += weights.lambda_depth * (report.depth + weights.lambda_dgpp * report.dgpp)
    report.total = total
    return report, grad_color, grad_depth


def total_loss(known: RenderOutput, ref_image, ref_depth, weights: LossWeights, mask_cfg: MaskConfig,
               novel: Optional[RenderOutput] = None, denoiser=None, rng=None, sds_cfg=None):
    """Full objective: known-view terms plus the injected SDS gradient.

    The SDS term has no scalar value; ``report.sds_norm`` records the
    magnitude of the injected gradient instead and ``report.total`` covers
    only the scalar terms.

    Returns:
        ``(report, (grad_color, grad_depth), novel_grads)`` where
        ``novel_grads`` is ``None`` when no novel view was supplied.
    """
    from .sds import SDSConfig, sds_gradient

    report, g_color, g_depth = known_view_loss(known, ref_image, ref_depth, weights, mask_cfg)
    novel_grads = None
    if novel is not None and denoiser is not None and weights.lambda_sds > 0:
        cfg = sds_cfg or SDSConfig()
        d_norm, ctx = normalize_rendered_depth(novel.depth)
        result = sds_gradient(novel.color, d_norm, denoiser, cfg.t_range, cfg.weight, weights.lambda_1,
                              weights.lambda_2, rng)
        report.sds_skipped = result.skipped
        g_img = weights.lambda_sds * result.grad_image
        g_dep = weights.lambda_sds * normalize_rendered_depth_backward(result.grad_depth, ctx)
        report.sds_norm = float(np.sqrt(np.sum(g_img**2) + np.sum(g_dep**2)))
        novel_grads = (g_img, g_dep)
    if not np.isfinite(report.total):
        raise FloatingPointError(f"non-finite loss: {report}")
    return report, (g_color, g_depth), novel_grads
