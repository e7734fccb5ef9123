"""Reference depth maps (PFM or 16-bit PNG) and RGB image loading."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from PIL import Image
from scipy.ndimage import map_coordinates


class DepthFormatError(ValueError):
    pass


class InvalidDepthError(ValueError):
    pass


@dataclass
class DepthMap:
    values: np.ndarray  # (H, W)
    normalized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"depth map must be 2D, got shape {self.values.shape}")


def normalize_depth(values: np.ndarray) -> np.ndarray:
    """Min-max normalization to [0, 1]; constant maps become all zeros."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi <= lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def read_pfm(path) -> np.ndarray:
    """Read a PFM file into an (H, W) or (H, W, 3) array, top row first."""
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        if header not in (b"Pf", b"PF"):
            raise DepthFormatError(f"{path}: not a PFM file")
        channels = 1 if header == b"Pf" else 3
        dims = fh.readline()
        while dims.startswith(b"#"):
            dims = fh.readline()
        m = re.match(rb"^\s*(\d+)\s+(\d+)\s*$", dims)
        if not m:
            raise DepthFormatError(f"{path}: malformed PFM dimensions")
        w, h = int(m.group(1)), int(m.group(2))
        try:
            scale = float(fh.readline().strip())
        except ValueError as exc:
            raise DepthFormatError(f"{path}: malformed PFM scale") from exc
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(), dtype=dtype)
    if data.size != w * h * channels:
        raise DepthFormatError(f"{path}: expected {w * h * channels} floats, found {data.size}")
    shape = (h, w) if channels == 1 else (h, w, 3)
    return np.flipud(data.reshape(shape)).astype(np.float64)


def write_pfm(path, values: np.ndarray) -> None:
    values = np.asarray(values, dtype="<f4")
    h, w = values.shape[:2]
    header = b"Pf" if values.ndim == 2 else b"PF"
    with open(path, "wb") as fh:
        fh.write(header + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        fh.write(np.flipud(values).tobytes())


def write_png16(path, values: np.ndarray) -> None:
    """Write a [0, 1] map as 16-bit grayscale PNG."""
    q = np.clip(np.round(np.asarray(values, dtype=np.float64) * 65535.0), 0, 65535).astype(np.uint16)
    Image.fromarray(q).save(path)


def _read_raw(path: Path) -> np.ndarray:
    if not path.exists():
        raise FileNotFoundError(path)
    if path.suffix.lower() == ".pfm":
        raw = read_pfm(path)
        return raw if raw.ndim == 2 else raw[..., 0]
    try:
        with Image.open(path) as img:
            if img.mode not in ("I;16", "I;16B", "I;16L", "I", "L", "F"):
                raise DepthFormatError(f"{path}: expected single-channel depth PNG, got mode {img.mode}")
            return np.array(img, dtype=np.float64)
    except (OSError, SyntaxError) as exc:
        raise DepthFormatError(f"{path}: unreadable depth file ({exc})") from exc


def resample_bilinear(values: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Bilinear resize to ``size = (W, H)`` with pixel-center alignment and edge clamping."""
    h, w = values.shape
    W, H = size
    if (W, H) == (w, h):
        return values.copy()
    ys = (np.arange(H) + 0.5) * (h / H) - 0.5
    xs = (np.arange(W) + 0.5) * (w / W) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return map_coordinates(values, [yy, xx], order=1, mode="nearest")


def load_depth_map(path, target_size: Optional[Tuple[int, int]] = None) -> DepthMap:
    """Load, resample to ``target_size = (W, H)`` and min-max normalize a depth map.

    Non-finite pixels are treated as the farthest finite depth.
    """
    raw = _read_raw(Path(path))
    finite = np.isfinite(raw)
    if not finite.any():
        raise InvalidDepthError(f"{path}: depth map has no finite values")
    if not finite.all():
        raw = np.where(finite, raw, raw[finite].max())
    if target_size is not None:
        raw = resample_bilinear(raw, target_size)
    return DepthMap(normalize_depth(raw), normalized=True)


def load_image(path, target_size: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """8-bit RGB image as float (H, W, 3) in [0, 1] (plain /255, no gamma handling)."""
    with Image.open(path) as img:
        img = img.convert("RGB")
        if target_size is not None and img.size != tuple(target_size):
            img = img.resize(tuple(target_size), Image.BILINEAR)
        return np.asarray(img, dtype=np.float64) / 255.0


def save_image(path, rgb: np.ndarray) -> None:
    q = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(q).save(path)
