"""Command line entry point: ``sparsesplat {densify,train,render,eval}``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .config import ConfigError, RunConfig, load_config

logger = logging.getLogger("sparsesplat")

DEPTH_SUFFIXES = (".pfm", ".png")


def _read_view_list(path: Optional[str], available: List[str]) -> List[str]:
    if path is None:
        return list(available)
    lines = Path(path).read_text().splitlines()
    return [ln.strip() for ln in lines if ln.strip() and not ln.startswith("#")]


def _find_depth(depth_dir: Path, view_name: str) -> Optional[Path]:
    stem = Path(view_name).stem
    for suffix in DEPTH_SUFFIXES:
        candidate = depth_dir / f"{stem}{suffix}"
        if candidate.exists():
            return candidate
    return None


def cmd_densify(args, run: RunConfig) -> int:
    from .densify import densify_pointcloud
    from .io.ply import read_pointcloud_ply, write_pointcloud_ply

    overrides = {"k_neighbors": args.k, "regions": args.regions, "retention_budget_local": args.local_budget,
                 "retention_budget_global": args.global_budget, "rng_seed": args.seed}
    cfg = dataclasses.replace(run.density, **{k: v for k, v in overrides.items() if v is not None})
    cloud = read_pointcloud_ply(args.input)
    dense = densify_pointcloud(cloud, cfg)
    write_pointcloud_ply(dense, args.out)
    return 0


def cmd_train(args, run: RunConfig) -> int:
    from .io.colmap import load_colmap_model
    from .io.depth import load_depth_map, load_image
    from .sds import make_denoiser
    from .trainer import train

    cfg = run.train
    if args.iterations is not None:
        cfg = dataclasses.replace(cfg, iterations=args.iterations)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, rng_seed=args.seed)
        run.density = dataclasses.replace(run.density, rng_seed=args.seed)
    model = load_colmap_model(args.colmap)
    if model.empty_points:
        logger.error("%s: the model has no 3D points to initialize from", args.colmap)
        return 2
    images_dir = Path(args.images)
    depth_dir = Path(args.depths) if args.depths else None
    names = _read_view_list(args.views, model.view_names)
    images, depths = {}, {}
    for name in names:
        cam = model.view(name)
        images[name] = load_image(images_dir / name, cam.size)
        path = _find_depth(depth_dir, name) if depth_dir else None
        if depth_dir and path is None:
            logger.warning("no depth map for %s; depth terms skipped for this view", name)
        depths[name] = load_depth_map(path, cam.size).values if path else None
    result = train(model, images, depths, cfg, run.loss, run.mask, run.smoothing,
                   density_cfg=None if args.no_densify else run.density,
                   denoiser=make_denoiser(args.denoiser), out_dir=args.out, views=names)
    logger.info("trained %d Gaussians; outputs in %s", len(result.scene), args.out)
    return 0


def _parse_background(text: str):
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 3:
        raise ValueError(f"background must be three comma-separated values, got {text!r}")
    return tuple(parts)


def cmd_render(args, run: RunConfig) -> int:
    from .io.colmap import load_colmap_model
    from .io.depth import save_image, write_pfm
    from .io.ply import read_ply
    from .rasterize import render

    scene = read_ply(args.scene)
    model = load_colmap_model(args.colmap)
    try:
        cam = model.view(args.view)
    except KeyError as exc:
        logger.error("%s", exc.args[0])
        return 2
    result = render(scene, cam, _parse_background(args.background), run.smoothing.s_filter)
    save_image(args.out, result.color)
    if args.depth_out:
        write_pfm(args.depth_out, result.depth)
    return 0


def cmd_eval(args, run: RunConfig) -> int:
    from .evaluate import evaluate
    from .io.colmap import load_colmap_model
    from .io.ply import read_ply

    scene = read_ply(args.scene)
    model = load_colmap_model(args.colmap)
    names = _read_view_list(args.views, model.view_names)
    try:
        report = evaluate(scene, model, names, args.images, filter_strength=run.smoothing.s_filter)
    except KeyError as exc:
        logger.error("%s", exc.args[0])
        return 2
    report.write(args.out)
    if report.view_count:
        print(f"{report.view_count} views: PSNR {report.mean_psnr:.3f} dB, SSIM {report.mean_ssim:.4f}")
    else:
        print("no views evaluated")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparsesplat", description="Sparse-view Gaussian splatting toolkit")
    parser.add_argument("--seed", type=int, default=None, help="random seed for densification and training")
    parser.add_argument("--threads", type=int, default=None, help="worker threads for the rasterizer")
    parser.add_argument("--config", default=None, help="TOML config file")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("densify", help="density-guided point cloud densification")
    p.add_argument("--in", dest="input", required=True, help="input point cloud PLY")
    p.add_argument("--out", required=True, help="output point cloud PLY")
    p.add_argument("--k", type=int, default=None, help="neighbors per density estimate")
    p.add_argument("--regions", type=int, default=None)
    p.add_argument("--local-budget", type=int, default=None)
    p.add_argument("--global-budget", type=int, default=None)
    p.set_defaults(func=cmd_densify)

    p = sub.add_parser("train", help="fit Gaussians to a COLMAP model")
    p.add_argument("--colmap", required=True, help="sparse model directory")
    p.add_argument("--images", required=True, help="image directory")
    p.add_argument("--depths", default=None, help="reference depth directory (<stem>.pfm or <stem>.png)")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--views", default=None, help="text file of training view names (default: all)")
    p.add_argument("--denoiser", default=None, help="perfect, linear or an http(s) URL")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--no-densify", action="store_true", help="initialize from the raw SfM cloud")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render one view of a trained scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--colmap", required=True)
    p.add_argument("--view", required=True, help="image name in the COLMAP model")
    p.add_argument("--out", required=True, help="output PNG")
    p.add_argument("--depth-out", default=None, help="optional camera-space depth as PFM")
    p.add_argument("--background", default="0,0,0", help="r,g,b in [0, 1]")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="PSNR/SSIM on held-out views")
    p.add_argument("--scene", required=True)
    p.add_argument("--colmap", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--views", default=None)
    p.add_argument("--out", required=True, help="report JSON (a CSV is written next to it)")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    if args.threads is not None:
        import numba

        numba.set_num_threads(max(1, min(args.threads, numba.config.NUMBA_NUM_THREADS)))
    try:
        run = load_config(args.config)
    except (ConfigError, OSError) as exc:
        logger.error("%s", exc)
        return 2
    try:
        return args.func(args, run)
    except (FileNotFoundError, ValueError) as exc:
        logger.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
