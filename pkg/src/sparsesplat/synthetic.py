"""Toy scenes and camera rigs for self-consistency fits."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from .camera import CameraModel
from .io.colmap import ImageRecord, SfmModel
from .pointcloud import PointCloud
from .rasterize import render
from .scene import Scene, logit
from .sh import rgb_to_sh_dc


def random_scene(n: int, rng: np.random.Generator, radius: float = 1.0, scale_range=(0.04, 0.15),
                 opacity_range=(0.6, 0.95), sh_degree: int = 0) -> Scene:
    """``n`` random anisotropic Gaussians inside a ball of ``radius``."""
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    centers = d * radius * rng.random((n, 1)) ** (1 / 3)
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q *= np.sign(q[:, :1] + 1e-12)
    log_scales = np.log(rng.uniform(*scale_range, size=(n, 3)))
    opac = rng.uniform(*opacity_range, size=n)
    sh = np.zeros((n, 3, (sh_degree + 1) ** 2))
    sh[:, :, 0] = rgb_to_sh_dc(rng.uniform(0.05, 0.95, size=(n, 3)))
    if sh_degree > 0:
        sh[:, :, 1:] = 0.1 * rng.standard_normal((n, 3, sh.shape[2] - 1))
    return Scene(centers, q, log_scales, logit(opac), sh)


def camera_ring(n: int, distance: float = 4.0, size=(128, 128), fov_deg: float = 50.0, elevation: float = 0.3,
                target=(0.0, 0.0, 0.0), phase: float = 0.0) -> List[CameraModel]:
    """``n`` cameras on a horizontal circle looking at ``target``, y axis down."""
    W, H = size
    focal = 0.5 * W / np.tan(np.radians(fov_deg) / 2)
    cams = []
    for i in range(n):
        a = phase + 2 * np.pi * i / n
        eye = np.array([distance * np.cos(a), -elevation * distance, distance * np.sin(a)])
        cams.append(CameraModel.look_at(eye, np.asarray(target, float), np.array([0.0, -1.0, 0.0]),
                                        (focal, focal), size, name=f"view_{i:03d}.png"))
    return cams


@dataclass
class SyntheticDataset:
    scene: Scene
    model: SfmModel
    images: Dict[str, np.ndarray]
    depths: Dict[str, np.ndarray]
    train_views: List[str]
    test_views: List[str]


def model_from_cameras(cameras: List[CameraModel], cloud: PointCloud) -> SfmModel:
    records = [ImageRecord(c.name, i, c.rotation, c.translation, i + 1) for i, c in enumerate(cameras)]
    return SfmModel(cameras=list(cameras), image_records=records, points=cloud)


def make_dataset(n_gaussians: int = 50, n_train: int = 8, n_test: int = 4, size=(128, 128), seed: int = 0,
                 n_init_points: Optional[int] = None, background=(0.0, 0.0, 0.0)) -> SyntheticDataset:
    """Render a random scene from a training ring and an interleaved test ring.

    The "SfM" cloud is a random subset of the generating centers, colored
    by their DC color (``n_init_points`` defaults to half the Gaussians).
    """
    rng = np.random.default_rng(seed)
    scene = random_scene(n_gaussians, rng)
    train = camera_ring(n_train, size=size)
    test = camera_ring(n_test, size=size, phase=np.pi / n_train)
    for i, c in enumerate(test):
        c.name = f"test_{i:03d}.png"
    k = n_init_points if n_init_points is not None else max(1, n_gaussians // 2)
    idx = np.sort(rng.choice(n_gaussians, size=k, replace=False))
    colors = np.clip(0.5 + 0.28209479177387814 * scene.sh_coeffs[idx, :, 0], 0, 1)
    cloud = PointCloud(scene.centers[idx].copy(), colors)
    cams = train + test
    model = model_from_cameras(cams, cloud)
    images, depths = {}, {}
    for c in cams:
        out = render(scene, c, background, filter_strength=0.0)
        images[c.name] = out.color
        depths[c.name] = out.depth
    return SyntheticDataset(scene, model, images, depths, [c.name for c in train], [c.name for c in test])

