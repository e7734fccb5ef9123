"""Held-out view evaluation."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Mapping, Sequence, Union

import numpy as np

from .io.colmap import SfmModel
from .io.depth import load_image
from .metrics import EvalReport, psnr, ssim
from .rasterize import render
from .scene import Scene


def _reference(images: Union[Mapping[str, np.ndarray], str, Path], name: str, size) -> np.ndarray:
    if isinstance(images, Mapping):
        return np.asarray(images[name], dtype=np.float64)
    return load_image(Path(images) / name, size)


def evaluate(scene: Scene, model: SfmModel, view_names: Sequence[str],
             images: Union[Dict[str, np.ndarray], str, Path], background=(0.0, 0.0, 0.0),
             filter_strength: float = 0.2) -> EvalReport:
    """Render each named view and score it against its reference image.

    ``images`` is either a name -> array mapping or a directory holding the
    image files named as in the model.
    """
    available = set(model.view_names)
    missing = [n for n in view_names if n not in available]
    if missing:
        raise KeyError(f"unknown view(s) {', '.join(missing)}; available: {', '.join(model.view_names)}")
    report = EvalReport()
    for name in view_names:
        cam = model.view(name)
        rendered = render(scene, cam, background, filter_strength).color
        ref = _reference(images, name, cam.size)
        report.view_names.append(name)
        report.psnr.append(psnr(np.clip(rendered, 0.0, 1.0), ref))
        report.ssim.append(ssim(np.clip(rendered, 0.0, 1.0), ref))
    return report
