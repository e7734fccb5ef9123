"""Image quality metrics: PSNR and SSIM (with an exact SSIM gradient)."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

PSNR_CAP = 99.0


def _check_pair(a: np.ndarray, b: np.ndarray):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio for images in [0, 1]; +inf when identical."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def psnr_capped(a, b) -> float:
    return min(psnr(a, b), PSNR_CAP)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation over the first two axes."""
    k = len(w)
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0)
    tmp = np.tensordot(rows, w, axes=([-1], [0]))
    cols = np.lib.stride_tricks.sliding_window_view(tmp, k, axis=1)
    return np.tensordot(cols, w, axes=([-1], [0]))


def _filter_adjoint(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`_filter_valid` (full convolution back to input size)."""
    k = len(w)
    pad = [(k - 1, k - 1), (k - 1, k - 1)] + [(0, 0)] * (g.ndim - 2)
    return _filter_valid(np.pad(g, pad), w[::-1])


def _as_hwc(img: np.ndarray) -> np.ndarray:
    return img[..., None] if img.ndim == 2 else img


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Windows are evaluated at every fully interior position; channels are
    averaged. Data range is assumed to be 1.
    """
    return ssim_with_grad(a, b, window, k1, k2, need_grad=False)[0]


def ssim_with_grad(a, b, window: int = 11, k1: float = 0.01, k2: float = 0.03, need_grad: bool = True):
    """SSIM and its gradient with respect to ``a``."""
    a, b = _check_pair(a, b)
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"images must be at least {window}x{window}, got {a.shape[:2]}")
    squeeze = a.ndim == 2
    a, b = _as_hwc(a), _as_hwc(b)
    w = gaussian_window(window)
    c1, c2 = k1**2, k2**2
    mx, my = _filter_valid(a, w), _filter_valid(b, w)
    mxx, myy, mxy = _filter_valid(a * a, w), _filter_valid(b * b, w), _filter_valid(a * b, w)
    vx, vy, cxy = mxx - mx * mx, myy - my * my, mxy - mx * my
    A1 = 2.0 * mx * my + c1
    A2 = 2.0 * cxy + c2
    B1 = mx * mx + my * my + c1
    B2 = vx + vy + c2
    S = (A1 * A2) / (B1 * B2)
    value = float(S.mean())
    if not need_grad:
        return value, None
    dS = np.full_like(S, 1.0 / S.size)
    g_mxx = dS * (-S / B2)
    g_mxy = dS * (2.0 * S / A2)
    g_mx = dS * (2.0 * my * S / A1 - 2.0 * my * S / A2 - 2.0 * mx * S / B1 + 2.0 * mx * S / B2)
    grad = _filter_adjoint(g_mx, w) + 2.0 * a * _filter_adjoint(g_mxx, w) + b * _filter_adjoint(g_mxy, w)
    if squeeze:
        grad = grad[..., 0]
    return value, grad


@dataclass
class EvalReport:
    view_names: List[str] = field(default_factory=list)
    psnr: List[float] = field(default_factory=list)
    ssim: List[float] = field(default_factory=list)

    @property
    def view_count(self) -> int:
        return len(self.view_names)

    @property
    def mean_psnr(self) -> Optional[float]:
        return float(np.mean(self.psnr)) if self.psnr else None

    @property
    def mean_ssim(self) -> Optional[float]:
        return float(np.mean(self.ssim)) if self.ssim else None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["psnr"] = [min(v, PSNR_CAP) for v in self.psnr]
        d["view_count"] = self.view_count
        d["mean_psnr"] = None if self.mean_psnr is None else min(self.mean_psnr, PSNR_CAP)
        d["mean_ssim"] = self.mean_ssim
        d["means_defined"] = self.view_count > 0
        return d

    def write(self, json_path, csv_path=None) -> None:
        json_path = Path(json_path)
        json_path.write_text(json.dumps(self.to_dict(), indent=2))
        csv_path = Path(csv_path) if csv_path else json_path.with_suffix(".csv")
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["view", "psnr", "ssim"])
            for name, p, s in zip(self.view_names, self.psnr, self.ssim):
                writer.writerow([name, min(p, PSNR_CAP), s])
