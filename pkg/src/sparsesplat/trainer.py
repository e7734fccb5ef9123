"""Optimization loop: initialization, density control, novel views, checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .camera import CameraModel
from .io.ply import write_ply
from .losses import LossReport, LossWeights, MaskConfig, known_view_loss, total_loss
from .optim import AdamW
from .pointcloud import PointCloud
from .rasterize import render, render_backward
from .scene import Scene, logit, matrix_to_quaternion, normalize_quaternion, quaternion_to_matrix, sigmoid
from .sds import Denoiser, SDSConfig
from .sh import num_basis, rgb_to_sh_dc
from .smoothing import SmoothingConfig, compute_max_frequency

logger = logging.getLogger(__name__)

PARAM_NAMES = ("centers", "rotations", "log_scales", "opacity_logits", "sh_coeffs")


@dataclass
class TrainConfig:
    iterations: int = 30000
    lr_center_init: float = 1.6e-4
    lr_center_final: float = 1.6e-6
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_sh: float = 2.5e-3
    weight_decay: float = 0.0
    spatial_lr_scale: Optional[float] = None  # None -> scene extent
    # adaptive density control
    grad_threshold: float = 2e-4
    min_opacity: float = 0.005
    densify_interval: int = 100
    densify_from: int = 500
    densify_until: int = 15000
    percent_dense: float = 0.01
    split_shrink: float = 1.6
    # schedules
    sh_degree_max: int = 3
    sh_interval: int = 1000
    smoothing_interval: int = 100
    smoothing_enabled: bool = True
    checkpoint_interval: int = 0
    # novel views for SDS
    sds_interval: int = 10
    sds_resolution_scale: float = 0.5
    sds_t_range: tuple = (0.02, 0.5)
    novel_max_angle_deg: float = 5.0
    novel_max_shift_frac: float = 0.02
    background: tuple = (0.0, 0.0, 0.0)
    rng_seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        for name in ("lr_center_init", "lr_center_final", "lr_rotation", "lr_scale", "lr_opacity", "lr_sh"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        self.sds_t_range = tuple(self.sds_t_range)
        self.background = tuple(self.background)


@dataclass
class TrainResult:
    scene: Scene
    metrics: List[dict] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)


def scene_extent(cameras: Sequence[CameraModel], cloud: Optional[PointCloud] = None) -> float:
    """1.1x the radius of the camera centers; falls back to the cloud diagonal, then 1."""
    if len(cameras) >= 2:
        centers = np.stack([c.center for c in cameras])
        radius = float(np.linalg.norm(centers - centers.mean(axis=0), axis=1).max())
        if radius > 0:
            return 1.1 * radius
    if cloud is not None and cloud.extent() > 0:
        return cloud.extent()
    return 1.0


def init_scene(cloud: PointCloud, cameras: Sequence[CameraModel] = (), extent: Optional[float] = None) -> Scene:
    """One isotropic Gaussian per point, sized by the mean distance to its 3 nearest neighbors."""
    n = len(cloud)
    if n == 0:
        raise ValueError("cannot initialize from an empty point cloud")
    if extent is None:
        extent = scene_extent(cameras, cloud)
    if n == 1:
        dist = np.array([extent / 100.0])
    else:
        k = min(3, n - 1)
        d, _ = cKDTree(cloud.positions).query(cloud.positions, k=k + 1)
        dist = np.maximum(d[:, 1:].mean(axis=1), 1e-7)
    colors = cloud.colors if cloud.colors is not None else np.full((n, 3), 0.5)
    sh = np.zeros((n, 3, 1))
    sh[:, :, 0] = rgb_to_sh_dc(colors)
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    return Scene(
        centers=cloud.positions.copy(),
        rotations=rotations,
        log_scales=np.repeat(np.log(dist)[:, None], 3, axis=1),
        opacity_logits=np.full(n, float(logit(0.1))),
        sh_coeffs=sh,
    )


@dataclass
class DensityControlResult:
    scene: Scene
    source: np.ndarray  # old row for each new row
    fresh: np.ndarray  # new rows that should start with zero optimizer state
    cloned: int = 0
    split: int = 0
    pruned: int = 0


def adaptive_density_control(scene: Scene, grad_accum: np.ndarray, grad_count: np.ndarray, cfg: TrainConfig,
                             extent: float, rng: np.random.Generator) -> DensityControlResult:
    """Clone small high-gradient Gaussians, split large ones, prune transparent ones.

    A clone duplicates the Gaussian and gives both copies opacity
    ``1 - sqrt(1 - a)`` so that the pair composites to the original
    opacity. A split replaces the Gaussian by two children with scales
    divided by ``cfg.split_shrink`` at ``mu +/- R (s * z)``, ``z ~ N(0, I)``
    (their mean is the parent center).
    """
    n = len(scene)
    avg = np.where(grad_count > 0, grad_accum / np.maximum(grad_count, 1), 0.0)
    hot = avg > cfg.grad_threshold
    big = scene.scales.max(axis=1) > cfg.percent_dense * extent
    clone = hot & ~big
    split = hot & big

    centers = [scene.centers]
    rotations = [scene.rotations]
    log_scales = [scene.log_scales.copy()]
    logits = [scene.opacity_logits.copy()]
    shs = [scene.sh_coeffs]
    source = [np.arange(n)]
    fresh = [np.zeros(n, dtype=bool)]

    ci = np.nonzero(clone)[0]
    if len(ci):
        halved = logit(1.0 - np.sqrt(1.0 - sigmoid(scene.opacity_logits[ci])))
        logits[0][ci] = halved
        centers.append(scene.centers[ci])
        rotations.append(scene.rotations[ci])
        log_scales.append(scene.log_scales[ci])
        logits.append(halved)
        shs.append(scene.sh_coeffs[ci])
        source.append(ci)
        fresh.append(np.ones(len(ci), dtype=bool))

    si = np.nonzero(split)[0]
    if len(si):
        R = quaternion_to_matrix(scene.rotations[si])
        z = rng.standard_normal((len(si), 3))
        offset = np.einsum("kij,kj->ki", R, scene.scales[si] * z)
        child_scale = scene.log_scales[si] - math.log(cfg.split_shrink)
        for sign in (1.0, -1.0):
            centers.append(scene.centers[si] + sign * offset)
            rotations.append(scene.rotations[si])
            log_scales.append(child_scale)
            logits.append(scene.opacity_logits[si])
            shs.append(scene.sh_coeffs[si])
            source.append(si)
            fresh.append(np.ones(len(si), dtype=bool))

    grown = Scene(
        np.concatenate(centers), np.concatenate(rotations), np.concatenate(log_scales),
        np.concatenate(logits), np.concatenate(shs), None, scene.sh_degree,
    )
    source_all = np.concatenate(source)
    fresh_all = np.concatenate(fresh)
    keep = np.ones(len(grown), dtype=bool)
    keep[si] = False  # split parents are replaced by their children
    transparent = grown.opacities < cfg.min_opacity
    keep &= ~transparent
    pruned = int((transparent & ~np.isin(np.arange(len(grown)), si)).sum())
    if scene.smoothing_state is not None:
        grown.smoothing_state = scene.smoothing_state[source_all]
    result = DensityControlResult(grown.subset(keep), source_all[keep], fresh_all[keep], len(ci), len(si), pruned)
    logger.info("density control: +%d clone, +%d split, -%d pruned -> %d", len(ci), len(si), pruned, len(result.scene))
    return result


def slerp_rotation(Ra: np.ndarray, Rb: np.ndarray, u: float) -> np.ndarray:
    qa = matrix_to_quaternion(Ra)
    qb = matrix_to_quaternion(Rb)
    dot = float(np.dot(qa, qb))
    if dot < 0:
        qb, dot = -qb, -dot
    if dot > 0.9999995:
        q = qa + u * (qb - qa)
    else:
        theta = math.acos(min(dot, 1.0))
        q = (math.sin((1 - u) * theta) * qa + math.sin(u * theta) * qb) / math.sin(theta)
    return quaternion_to_matrix(normalize_quaternion(q))


def interpolate_pose(cam_a: CameraModel, cam_b: CameraModel, u: float) -> CameraModel:
    """Pose between two cameras: slerped orientation, linearly interpolated center."""
    if u == 0.0:
        return CameraModel(cam_a.rotation, cam_a.translation, cam_a.focal, cam_a.size, cam_a.principal, "novel")
    # interpolate camera-to-world orientation and camera centers
    R = slerp_rotation(cam_a.rotation.T, cam_b.rotation.T, u).T
    center = (1.0 - u) * cam_a.center + u * cam_b.center
    return CameraModel(R, -R @ center, cam_a.focal, cam_a.size, cam_a.principal, "novel")


def _axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * K @ K


def sample_novel_view(cameras: Sequence[CameraModel], rng: np.random.Generator, extent: Optional[float] = None,
                      max_angle_deg: float = 5.0, max_shift_frac: float = 0.02) -> CameraModel:
    """Random pose between two adjacent training cameras plus a small jitter."""
    if len(cameras) < 2:
        raise ValueError("need at least two training cameras to sample novel views")
    extent = extent if extent is not None else scene_extent(cameras)
    i = int(rng.integers(0, len(cameras) - 1))
    u = float(rng.random())
    cam = interpolate_pose(cameras[i], cameras[i + 1], u)
    angle = math.radians(max_angle_deg) * float(rng.random())
    jitter = _axis_angle(rng.standard_normal(3), angle)
    direction = rng.standard_normal(3)
    shift = direction / np.linalg.norm(direction) * max_shift_frac * extent * float(rng.random())
    R = jitter @ cam.rotation
    center = cam.center + shift
    R = np.linalg.svd(R)[0] @ np.linalg.svd(R)[2]
    return CameraModel(R, -R @ center, cam.focal, cam.size, cam.principal, "novel")


def _param_dict(scene: Scene) -> Dict[str, np.ndarray]:
    return {name: getattr(scene, name) for name in PARAM_NAMES}


class Trainer:
    """Stateful optimization loop over one scene.

    The scene is owned by the trainer and mutated only between renders.
    """

    def __init__(self, scene: Scene, cameras: Sequence[CameraModel], images: Sequence[np.ndarray],
                 depths: Sequence[Optional[np.ndarray]], cfg: TrainConfig, weights: LossWeights = None,
                 mask_cfg: MaskConfig = None, smoothing_cfg: SmoothingConfig = None,
                 denoiser: Optional[Denoiser] = None, out_dir=None, extent: Optional[float] = None):
        if not cameras:
            raise ValueError("at least one training view is required")
        if not (len(cameras) == len(images) == len(depths)):
            raise ValueError("cameras, images and depths must align")
        self.scene = scene.copy()
        self.cameras = list(cameras)
        self.images = [np.asarray(im, dtype=np.float64) for im in images]
        self.depths = [None if d is None else np.asarray(getattr(d, "values", d), dtype=np.float64) for d in depths]
        self.cfg = cfg
        self.weights = weights or LossWeights()
        self.mask_cfg = mask_cfg or MaskConfig()
        self.smoothing_cfg = smoothing_cfg or SmoothingConfig()
        self.denoiser = denoiser
        self.sds_cfg = SDSConfig(cfg.sds_t_range, 1.0, cfg.sds_interval, cfg.sds_resolution_scale)
        self.out_dir = Path(out_dir) if out_dir else None
        self.extent = extent if extent is not None else scene_extent(self.cameras)
        self.spatial_lr_scale = cfg.spatial_lr_scale if cfg.spatial_lr_scale is not None else self.extent
        self.optimizer = AdamW(weight_decay=cfg.weight_decay)
        seeds = np.random.SeedSequence(cfg.rng_seed).spawn(2)
        self.rng = np.random.default_rng(seeds[0])
        self.sds_rng = np.random.default_rng(seeds[1])
        self.iteration = 0
        self.metrics: List[dict] = []
        self.checkpoints: List[Path] = []
        self._reset_stats()
        self.refresh_smoothing()
        self._t0 = time.perf_counter()

    @property
    def filter_strength(self) -> float:
        return self.smoothing_cfg.s_filter if self.cfg.smoothing_enabled else 0.0

    def _reset_stats(self):
        self.grad_accum = np.zeros(len(self.scene))
        self.grad_count = np.zeros(len(self.scene))

    def refresh_smoothing(self):
        if self.cfg.smoothing_enabled:
            table = compute_max_frequency(self.scene.centers, self.cameras, self.smoothing_cfg)
            self.scene.smoothing_state = table.zeta
        else:
            self.scene.smoothing_state = None

    def learning_rates(self) -> Dict[str, float]:
        cfg = self.cfg
        r = min(self.iteration / cfg.iterations, 1.0)
        lr_c = math.exp((1 - r) * math.log(cfg.lr_center_init) + r * math.log(cfg.lr_center_final))
        return {
            "centers": lr_c * self.spatial_lr_scale,
            "rotations": cfg.lr_rotation,
            "log_scales": cfg.lr_scale,
            "opacity_logits": cfg.lr_opacity,
            "sh_coeffs": cfg.lr_sh,
        }

    def _grow_sh(self):
        new_degree = self.scene.sh_degree + 1
        self.scene = self.scene.with_sh_degree(new_degree)
        self.optimizer.pad_last_axis("sh_coeffs", num_basis(new_degree))

    def _dump_failure(self, report: LossReport, view: str):
        msg = f"non-finite loss at iteration {self.iteration} (view {view}): {report.as_row()}"
        if self.out_dir:
            crash = self.out_dir / "crash"
            crash.mkdir(parents=True, exist_ok=True)
            (crash / "diagnostic.json").write_text(json.dumps(
                {"iteration": self.iteration, "view": view, "report": report.as_row()}, indent=2, default=str))
            try:
                write_ply(self.scene, crash / "scene.ply")
            except ValueError:
                pass
        raise FloatingPointError(msg)

    def _sample_novel(self) -> Optional[CameraModel]:
        cfg = self.cfg
        if self.denoiser is None or self.weights.lambda_sds == 0 or len(self.cameras) < 2:
            return None
        if not cfg.sds_interval or self.iteration % cfg.sds_interval:
            return None
        cam = sample_novel_view(self.cameras, self.sds_rng, self.extent, cfg.novel_max_angle_deg,
                                cfg.novel_max_shift_frac)
        return cam.scaled(cfg.sds_resolution_scale)

    def step(self) -> LossReport:
        """Run one iteration and return its loss report."""
        cfg = self.cfg
        self.iteration += 1
        it = self.iteration
        if cfg.sh_interval and it % cfg.sh_interval == 0 and self.scene.sh_degree < cfg.sh_degree_max:
            self._grow_sh()

        v = (it - 1) % len(self.cameras)
        cam = self.cameras[v]
        out = render(self.scene, cam, cfg.background, self.filter_strength)
        novel_cam = self._sample_novel()
        novel_out = None if novel_cam is None else render(self.scene, novel_cam, cfg.background, self.filter_strength)
        try:
            report, (g_color, g_depth), novel_grads = total_loss(
                out, self.images[v], self.depths[v], self.weights, self.mask_cfg, novel_out, self.denoiser,
                self.sds_rng, self.sds_cfg)
        except FloatingPointError:
            report, _, _ = known_view_loss(out, self.images[v], self.depths[v], self.weights, self.mask_cfg)
            self._dump_failure(report, cam.name)
        grads = render_backward(self.scene, cam, g_color, g_depth, cfg.background, self.filter_strength)
        # densification statistics come from the known view only
        grad_norm2d = np.linalg.norm(grads.mean2d, axis=1)
        visible = grads.visible.copy()
        if novel_grads is not None:
            grads += render_backward(self.scene, novel_cam, novel_grads[0], novel_grads[1], cfg.background,
                                     self.filter_strength)

        params = _param_dict(self.scene)
        self.optimizer.step(params, grads.as_dict(), self.learning_rates())
        self.scene.rotations /= np.linalg.norm(self.scene.rotations, axis=1, keepdims=True)
        if not all(np.all(np.isfinite(p)) for p in params.values()):
            self._dump_failure(report, cam.name)

        self.grad_accum[visible] += grad_norm2d[visible]
        self.grad_count[visible] += 1

        changed = False
        if cfg.densify_from <= it <= cfg.densify_until and cfg.densify_interval and it % cfg.densify_interval == 0:
            res = adaptive_density_control(self.scene, self.grad_accum, self.grad_count, cfg, self.extent, self.rng)
            self.scene = res.scene
            self.optimizer.remap_rows(res.source, res.fresh)
            self._reset_stats()
            changed = True
        if changed or (cfg.smoothing_interval and it % cfg.smoothing_interval == 0):
            self.refresh_smoothing()

        row = {"iteration": it, **report.as_row(), "n_gaussians": len(self.scene),
               "wall_time": time.perf_counter() - self._t0}
        self.metrics.append(row)
        if cfg.checkpoint_interval and it % cfg.checkpoint_interval == 0:
            self.checkpoint()
        return report

    def checkpoint(self) -> Optional[Path]:
        if not self.out_dir:
            return None
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / f"checkpoint_{self.iteration:06d}.ply"
        write_ply(self.scene, path)
        sidecar = {"iteration": self.iteration, "train": asdict(self.cfg), "loss_weights": asdict(self.weights),
                   "mask": asdict(self.mask_cfg), "smoothing": asdict(self.smoothing_cfg)}
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, default=list))
        self.checkpoints.append(path)
        return path

    def write_metrics(self, path) -> None:
        if not self.metrics:
            return
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(self.metrics[0]))
            writer.writeheader()
            writer.writerows(self.metrics)

    def run(self, iterations: Optional[int] = None, callback=None) -> TrainResult:
        total = iterations if iterations is not None else self.cfg.iterations
        for _ in range(total):
            report = self.step()
            if callback is not None:
                callback(self, report)
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            write_ply(self.scene, self.out_dir / "final.ply")
            # filter folded in, for viewers that ignore the zeta property
            write_ply(self.scene, self.out_dir / "final_viewer.ply", bake_filter_strength=self.filter_strength)
            self.write_metrics(self.out_dir / "metrics.csv")
        return TrainResult(self.scene, self.metrics, self.checkpoints)


def train(model, images: Dict[str, np.ndarray], depths: Dict[str, Optional[np.ndarray]], cfg: TrainConfig,
          weights: LossWeights = None, mask_cfg: MaskConfig = None, smoothing_cfg: SmoothingConfig = None,
          density_cfg=None, denoiser: Optional[Denoiser] = None, out_dir=None, views: Optional[List[str]] = None,
          init_cloud: Optional[PointCloud] = None, callback=None) -> TrainResult:
    """Fit Gaussians to the registered views of an :class:`SfmModel`.

    The SfM cloud (or ``init_cloud``) is densified with ``density_cfg`` when
    given, turned into Gaussians and optimized for ``cfg.iterations`` steps.
    """
    from .densify import densify_pointcloud

    names = views if views is not None else [n for n in model.view_names if n in images]
    if not names:
        raise ValueError("no training views with images")
    cameras = [model.view(n) for n in names]
    cloud = init_cloud if init_cloud is not None else model.points
    if density_cfg is not None:
        cloud = densify_pointcloud(cloud, density_cfg)
    extent = scene_extent(cameras, cloud)
    scene = init_scene(cloud, cameras, extent)
    trainer = Trainer(scene, cameras, [images[n] for n in names], [depths.get(n) for n in names], cfg, weights,
                      mask_cfg, smoothing_cfg, denoiser, out_dir, extent)
    return trainer.run(callback=callback)
