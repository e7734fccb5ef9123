"""Density-guided densification of sparse SfM point clouds.

The cloud is split into balanced regions; inside every region's bounding
box, candidates are drawn uniformly and kept with probability proportional
to a truncated k-NN kernel density against the region's own points. A
second, global pass does the same over the whole cloud's bounding box
against all points. Both selections are unioned with the input.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.spatial import cKDTree

from .pointcloud import PointCloud

logger = logging.getLogger(__name__)


@dataclass
class DensityConfig:
    """Densification knobs.

    ``None`` means "derive from the cloud": bandwidths default to 1.5x the
    median k-NN distance, candidate counts to 4x the member count, the local
    budget to ``|P|`` and the global budget to ``|P| / 2``.
    """

    k_neighbors: int = 8
    bandwidth_global: Optional[float] = None
    bandwidth_local: Optional[float] = None
    regions: int = 64
    candidates_per_region: Optional[int] = None
    global_candidates: Optional[int] = None
    retention_budget_local: Optional[int] = None
    retention_budget_global: Optional[int] = None
    rng_seed: int = 0

    def __post_init__(self):
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")
        if self.regions < 1:
            raise ValueError("regions must be >= 1")
        for name in ("bandwidth_global", "bandwidth_local"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("candidates_per_region", "global_candidates", "retention_budget_local", "retention_budget_global"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class Region:
    min_corner: np.ndarray
    max_corner: np.ndarray
    member_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def _clamp_k(k: int, n: int) -> int:
    if k > n:
        logger.warning("k=%d exceeds reference size %d; clamping", k, n)
        return n
    return k


def estimate_density(queries: np.ndarray, reference: np.ndarray, k: int, sigma: float,
                     tree: Optional[cKDTree] = None) -> np.ndarray:
    """Truncated Gaussian KDE: sum of ``exp(-d^2 / (2 sigma^2))`` over the k nearest references."""
    reference = np.asarray(reference, dtype=np.float64).reshape(-1, 3)
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    if len(reference) == 0:
        raise ValueError("reference cloud is empty")
    if sigma <= 0:
        raise ValueError("bandwidth must be positive")
    k = _clamp_k(k, len(reference))
    if len(queries) == 0:
        return np.zeros(0)
    tree = tree if tree is not None else cKDTree(reference)
    dist, _ = tree.query(queries, k=k)
    dist = np.asarray(dist).reshape(len(queries), k)
    return np.exp(-(dist**2) / (2.0 * sigma**2)).sum(axis=1)


def median_knn_distance(points: np.ndarray, k: int, tree: Optional[cKDTree] = None) -> float:
    """Median over points of the mean distance to their k nearest other points."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) < 2:
        return 0.0
    k = min(k, len(points) - 1)
    tree = tree if tree is not None else cKDTree(points)
    dist, _ = tree.query(points, k=k + 1)
    return float(np.median(dist[:, 1:].mean(axis=1)))


def partition_regions(cloud, n_regions: int) -> List[Region]:
    """Recursive median split along the longest box axis into ``n_regions`` leaves."""
    points = np.asarray(getattr(cloud, "positions", cloud), dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise ValueError("cannot partition an empty cloud")
    if n_regions < 1:
        raise ValueError("n_regions must be >= 1")
    n_regions = min(n_regions, len(points))
    regions: List[Region] = []

    def split(members: np.ndarray, leaves: int):
        sub = points[members]
        lo, hi = sub.min(axis=0), sub.max(axis=0)
        if leaves == 1:
            regions.append(Region(lo, hi, members))
            return
        axis = int(np.argmax(hi - lo))
        order = members[np.argsort(sub[:, axis], kind="stable")]
        left_leaves = leaves // 2
        cut = (len(members) * left_leaves) // leaves
        split(order[:cut], left_leaves)
        split(order[cut:], leaves - left_leaves)

    split(np.arange(len(points)), n_regions)
    return regions


def sample_candidates(region: Region, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` points uniform in the region's box."""
    if count < 0:
        raise ValueError("count must be >= 0")
    lo = np.asarray(region.min_corner, dtype=np.float64)
    hi = np.asarray(region.max_corner, dtype=np.float64)
    return lo + (hi - lo) * rng.random((count, 3))


def density_sample_indices(densities: np.ndarray, budget: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of ``budget`` distinct candidates drawn with probability proportional to density.

    Uses systematic (low-variance) resampling: candidates whose share would
    exceed one draw are taken outright and the remaining budget is spread
    over the rest. Inclusion probability is ``min(1, budget * p_i)`` in the
    uncapped case.
    """
    rho = np.asarray(densities, dtype=np.float64).reshape(-1)
    if np.any(rho < 0) or not np.all(np.isfinite(rho)):
        raise ValueError("densities must be finite and non-negative")
    if budget < 0:
        raise ValueError("budget must be >= 0")
    n = len(rho)
    if budget >= n:
        return np.arange(n)
    if budget == 0:
        return np.zeros(0, dtype=np.int64)
    if rho.sum() == 0:
        rho = np.ones(n)

    chosen = np.zeros(n, dtype=bool)
    remaining = budget
    while remaining > 0:
        live = ~chosen
        w = np.where(live, rho, 0.0)
        total = w.sum()
        if total == 0:
            w = live.astype(np.float64)
            total = w.sum()
        share = remaining * w / total
        sure = live & (share >= 1.0)
        if not sure.any():
            break
        take = np.nonzero(sure)[0][:remaining]
        chosen[take] = True
        remaining -= len(take)
    if remaining > 0:
        live = ~chosen
        w = np.where(live, rho, 0.0)
        if w.sum() == 0:
            w = live.astype(np.float64)
        cum = np.cumsum(remaining * w / w.sum())
        u = rng.random() + np.arange(remaining)
        picks = np.searchsorted(cum, u, side="right")
        picks = np.minimum(picks, n - 1)
        chosen[picks] = True
    return np.nonzero(chosen)[0]


def select_by_density(candidates: np.ndarray, densities: np.ndarray, budget: int, rng: np.random.Generator):
    """Subset of ``candidates`` chosen by :func:`density_sample_indices`."""
    candidates = np.asarray(candidates)
    if len(candidates) != len(densities):
        raise ValueError("need one density per candidate")
    return candidates[density_sample_indices(densities, budget, rng)]


def _nearest_colors(cloud: PointCloud, tree: cKDTree, points: np.ndarray) -> Optional[np.ndarray]:
    if cloud.colors is None:
        return None
    if len(points) == 0:
        return np.zeros((0, 3))
    _, nn = tree.query(points, k=1)
    return cloud.colors[nn]


def densify_pointcloud(cloud: PointCloud, cfg: DensityConfig) -> PointCloud:
    """Return ``cloud`` plus density-selected local and global candidates.

    The input points come first and are copied unchanged, followed by the
    local selections (region by region) and then the global selections.
    New points take the color of their nearest input point.
    """
    if len(cloud) == 0:
        raise ValueError("cannot densify an empty cloud")
    rng = np.random.default_rng(cfg.rng_seed)
    P = cloud.positions
    n = len(P)
    k = cfg.k_neighbors
    tree = cKDTree(P)
    base_bw = 1.5 * median_knn_distance(P, k, tree)
    if base_bw <= 0:
        base_bw = 1.0
    bw_global = cfg.bandwidth_global or base_bw
    budget_local = n if cfg.retention_budget_local is None else cfg.retention_budget_local
    budget_global = n // 2 if cfg.retention_budget_global is None else cfg.retention_budget_global

    new_points = []
    if budget_local > 0:
        regions = partition_regions(P, cfg.regions)
        share, extra = divmod(budget_local, len(regions))
        for r, region in enumerate(regions):
            members = P[region.member_indices]
            count = cfg.candidates_per_region if cfg.candidates_per_region is not None else 4 * len(members)
            cand = sample_candidates(region, count, rng)
            bw = cfg.bandwidth_local
            if bw is None:
                bw = 1.5 * median_knn_distance(members, k) if len(members) > 1 else 0.0
                bw = bw if bw > 0 else bw_global
            rho = estimate_density(cand, members, min(k, len(members)), bw)
            keep = density_sample_indices(rho, share + (1 if r < extra else 0), rng)
            new_points.append(cand[keep])

    if budget_global > 0:
        count = cfg.global_candidates if cfg.global_candidates is not None else 4 * n
        lo, hi = P.min(axis=0), P.max(axis=0)
        cand = sample_candidates(Region(lo, hi), count, rng)
        rho = estimate_density(cand, P, min(k, n), bw_global, tree)
        keep = density_sample_indices(rho, budget_global, rng)
        new_points.append(cand[keep])

    added = np.concatenate(new_points) if new_points else np.zeros((0, 3))
    positions = np.concatenate([P, added])
    colors = None
    if cloud.colors is not None:
        colors = np.concatenate([cloud.colors, _nearest_colors(cloud, tree, added)])
    logger.info("densified %d -> %d points", n, len(positions))
    return PointCloud(positions, colors)
