"""COLMAP sparse model reader/writer (text and binary layouts)."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from ..camera import CameraModel
from ..pointcloud import PointCloud
from ..scene import matrix_to_quaternion, quaternion_to_matrix

logger = logging.getLogger(__name__)

# name -> (model id, number of params)
CAMERA_MODELS = {
    "SIMPLE_PINHOLE": (0, 3),
    "PINHOLE": (1, 4),
    "SIMPLE_RADIAL": (2, 4),
    "RADIAL": (3, 5),
    "OPENCV": (4, 8),
    "OPENCV_FISHEYE": (5, 8),
    "FULL_OPENCV": (6, 12),
    "FOV": (7, 5),
    "SIMPLE_RADIAL_FISHEYE": (8, 4),
    "RADIAL_FISHEYE": (9, 5),
    "THIN_PRISM_FISHEYE": (10, 12),
}
CAMERA_MODEL_NAMES = {mid: name for name, (mid, _) in CAMERA_MODELS.items()}
SUPPORTED_MODELS = ("SIMPLE_PINHOLE", "PINHOLE", "SIMPLE_RADIAL")


class ColmapParseError(ValueError):
    pass


class UnsupportedCameraModelError(ValueError):
    pass


@dataclass
class ImageRecord:
    name: str
    camera_index: int
    rotation: np.ndarray  # world-to-camera
    translation: np.ndarray
    image_id: int = 0


@dataclass
class SfmModel:
    """Cameras (intrinsics, identity pose), registered images and the sparse cloud."""

    cameras: List[CameraModel]
    image_records: List[ImageRecord]
    points: PointCloud
    warnings: List[str] = field(default_factory=list)
    camera_ids: List[int] = field(default_factory=list)

    def __post_init__(self):
        for rec in self.image_records:
            if not 0 <= rec.camera_index < len(self.cameras):
                raise ValueError(f"image {rec.name!r} references missing camera {rec.camera_index}")

    @property
    def empty_points(self) -> bool:
        return len(self.points) == 0

    @property
    def view_names(self) -> List[str]:
        return [r.name for r in self.image_records]

    def view(self, name_or_index) -> CameraModel:
        if isinstance(name_or_index, str):
            matches = [r for r in self.image_records if r.name == name_or_index]
            if not matches:
                raise KeyError(f"unknown view {name_or_index!r}; available: {', '.join(self.view_names)}")
            rec = matches[0]
        else:
            rec = self.image_records[name_or_index]
        intr = self.cameras[rec.camera_index]
        return CameraModel(rec.rotation, rec.translation, intr.focal, intr.size, intr.principal, rec.name)

    def views(self) -> List[CameraModel]:
        return [self.view(i) for i in range(len(self.image_records))]


def _intrinsics(model: str, width: int, height: int, params, where: str, warnings: List[str]) -> CameraModel:
    if model not in SUPPORTED_MODELS:
        raise UnsupportedCameraModelError(
            f"{where}: unsupported camera model {model}; supported: {', '.join(SUPPORTED_MODELS)}"
        )
    params = [float(p) for p in params]
    if model == "SIMPLE_PINHOLE":
        f, cx, cy = params
        fx = fy = f
    elif model == "PINHOLE":
        fx, fy, cx, cy = params
    else:
        f, cx, cy, k = params
        fx = fy = f
        if k != 0.0:
            msg = f"{where}: SIMPLE_RADIAL distortion k={k:g} dropped"
            logger.warning(msg)
            warnings.append(msg)
    return CameraModel(np.eye(3), np.zeros(3), (fx, fy), (width, height), (cx, cy))


def _pose(qvec, tvec) -> Tuple[np.ndarray, np.ndarray]:
    R = quaternion_to_matrix(np.asarray(qvec, dtype=np.float64))
    # re-orthonormalize to remove rounding in stored quaternions
    u, _, vt = np.linalg.svd(R)
    return u @ vt, np.asarray(tvec, dtype=np.float64)


def _data_lines(path: Path):
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if stripped.startswith("#"):
                continue
            yield lineno, stripped


def _read_text(directory: Path, warnings: List[str]):
    cameras: Dict[int, CameraModel] = {}
    path = directory / "cameras.txt"
    for lineno, line in _data_lines(path):
        if not line:
            continue
        parts = line.split()
        try:
            cam_id, model, w, h = int(parts[0]), parts[1], int(parts[2]), int(parts[3])
            nparams = CAMERA_MODELS.get(model, (None, len(parts) - 4))[1]
            if len(parts) - 4 != nparams:
                raise ValueError(f"expected {nparams} params, got {len(parts) - 4}")
            params = [float(p) for p in parts[4:]]
        except (IndexError, ValueError) as exc:
            raise ColmapParseError(f"{path}:{lineno}: malformed camera record ({exc})") from exc
        cameras[cam_id] = _intrinsics(model, w, h, params, f"{path}:{lineno}", warnings)

    images = []
    path = directory / "images.txt"
    expect_points = False
    for lineno, line in _data_lines(path):
        if expect_points:
            expect_points = False
            continue
        if not line:
            continue
        parts = line.split()
        try:
            image_id = int(parts[0])
            qvec = [float(v) for v in parts[1:5]]
            tvec = [float(v) for v in parts[5:8]]
            cam_id = int(parts[8])
            name = " ".join(parts[9:])
            if not name:
                raise ValueError("missing image name")
        except (IndexError, ValueError) as exc:
            raise ColmapParseError(f"{path}:{lineno}: malformed image record ({exc})") from exc
        images.append((image_id, qvec, tvec, cam_id, name, f"{path}:{lineno}"))
        expect_points = True

    xyz, rgb = [], []
    path = directory / "points3D.txt"
    for lineno, line in _data_lines(path):
        if not line:
            continue
        parts = line.split()
        try:
            xyz.append([float(v) for v in parts[1:4]])
            rgb.append([int(v) for v in parts[4:7]])
            if len(xyz[-1]) != 3 or len(rgb[-1]) != 3:
                raise ValueError("short point record")
            float(parts[7])
        except (IndexError, ValueError) as exc:
            raise ColmapParseError(f"{path}:{lineno}: malformed point record ({exc})") from exc
    return cameras, images, np.array(xyz, dtype=np.float64).reshape(-1, 3), np.array(rgb, dtype=np.float64).reshape(-1, 3)


class _Reader:
    def __init__(self, path: Path):
        self.path = path
        self.data = path.read_bytes()
        self.offset = 0

    def unpack(self, fmt: str):
        size = struct.calcsize("<" + fmt)
        if self.offset + size > len(self.data):
            raise ColmapParseError(f"{self.path}: truncated record at byte offset {self.offset}")
        out = struct.unpack_from("<" + fmt, self.data, self.offset)
        self.offset += size
        return out

    def cstring(self) -> str:
        end = self.data.find(b"\x00", self.offset)
        if end < 0:
            raise ColmapParseError(f"{self.path}: unterminated string at byte offset {self.offset}")
        s = self.data[self.offset:end].decode("utf-8")
        self.offset = end + 1
        return s


def _read_binary(directory: Path, warnings: List[str]):
    cameras: Dict[int, CameraModel] = {}
    r = _Reader(directory / "cameras.bin")
    (n,) = r.unpack("Q")
    for _ in range(n):
        at = r.offset
        cam_id, model_id, w, h = r.unpack("iiQQ")
        if model_id not in CAMERA_MODEL_NAMES:
            raise ColmapParseError(f"{r.path}: unknown camera model id {model_id} at byte offset {at}")
        model = CAMERA_MODEL_NAMES[model_id]
        params = r.unpack("d" * CAMERA_MODELS[model][1])
        cameras[cam_id] = _intrinsics(model, w, h, params, f"{r.path}@{at}", warnings)

    images = []
    r = _Reader(directory / "images.bin")
    (n,) = r.unpack("Q")
    for _ in range(n):
        at = r.offset
        vals = r.unpack("idddddddi")
        name = r.cstring()
        (npts,) = r.unpack("Q")
        r.unpack("ddq" * npts)
        images.append((vals[0], vals[1:5], vals[5:8], vals[8], name, f"{r.path}@{at}"))

    r = _Reader(directory / "points3D.bin")
    (n,) = r.unpack("Q")
    xyz = np.zeros((n, 3))
    rgb = np.zeros((n, 3))
    for i in range(n):
        vals = r.unpack("QdddBBBd")
        xyz[i] = vals[1:4]
        rgb[i] = vals[4:7]
        (track,) = r.unpack("Q")
        r.unpack("ii" * track)
    return cameras, images, xyz, rgb


def detect_format(directory) -> str:
    directory = Path(directory)
    names = ("cameras", "images", "points3D")
    if all((directory / f"{n}.bin").exists() for n in names):
        return "binary"
    if all((directory / f"{n}.txt").exists() for n in names):
        return "text"
    missing = [f"{n}.(bin|txt)" for n in names if not (directory / f"{n}.bin").exists() and not (directory / f"{n}.txt").exists()]
    raise FileNotFoundError(f"COLMAP model not found in {directory}; missing {', '.join(missing) or 'a consistent file set'}")


def load_colmap_model(directory, format: str = "auto") -> SfmModel:
    """Load cameras, registered images and 3D points from a COLMAP sparse model.

    Images are returned sorted by name; colors are scaled to [0, 1].
    """
    directory = Path(directory)
    if format == "auto":
        format = detect_format(directory)
    ext = {"text": "txt", "binary": "bin"}.get(format)
    if ext is None:
        raise ValueError(f"format must be auto, text or binary, got {format!r}")
    for n in ("cameras", "images", "points3D"):
        if not (directory / f"{n}.{ext}").exists():
            raise FileNotFoundError(f"{directory / f'{n}.{ext}'} not found")

    warnings: List[str] = []
    reader = _read_text if format == "text" else _read_binary
    cameras, images, xyz, rgb = reader(directory, warnings)

    cam_ids = sorted(cameras)
    cam_index = {cid: i for i, cid in enumerate(cam_ids)}
    records = []
    for image_id, qvec, tvec, cam_id, name, where in sorted(images, key=lambda im: im[4]):
        if cam_id not in cam_index:
            raise ColmapParseError(f"{where}: image {name!r} references unknown camera id {cam_id}")
        R, t = _pose(qvec, tvec)
        records.append(ImageRecord(name, cam_index[cam_id], R, t, image_id))
    if len(xyz) == 0:
        msg = f"{directory}: reconstruction has no 3D points"
        logger.warning(msg)
        warnings.append(msg)
    return SfmModel(
        cameras=[cameras[c] for c in cam_ids],
        image_records=records,
        points=PointCloud(xyz, rgb / 255.0),
        warnings=warnings,
        camera_ids=cam_ids,
    )


def _camera_params(cam: CameraModel) -> Tuple[str, List[float]]:
    fx, fy = cam.focal
    cx, cy = cam.principal
    if fx == fy:
        return "SIMPLE_PINHOLE", [fx, cx, cy]
    return "PINHOLE", [fx, fy, cx, cy]


def write_colmap_model(model: SfmModel, directory, format: str = "text") -> None:
    """Write ``model`` in COLMAP text or binary layout (empty 2D tracks)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cam_ids = model.camera_ids or list(range(1, len(model.cameras) + 1))
    qvecs = [matrix_to_quaternion(r.rotation) for r in model.image_records]
    colors = model.points.colors if model.points.colors is not None else np.full((len(model.points), 3), 0.5)
    rgb = np.clip(np.round(colors * 255.0), 0, 255).astype(int)

    if format == "text":
        with open(directory / "cameras.txt", "w") as fh:
            fh.write("# Camera list with one line of data per camera:\n")
            for cid, cam in zip(cam_ids, model.cameras):
                name, params = _camera_params(cam)
                fh.write(f"{cid} {name} {cam.width} {cam.height} " + " ".join(repr(float(p)) for p in params) + "\n")
        with open(directory / "images.txt", "w") as fh:
            fh.write("# Image list with two lines of data per image:\n")
            for i, (rec, q) in enumerate(zip(model.image_records, qvecs)):
                image_id = rec.image_id or i + 1
                vals = " ".join(repr(float(v)) for v in list(q) + list(rec.translation))
                fh.write(f"{image_id} {vals} {cam_ids[rec.camera_index]} {rec.name}\n\n")
        with open(directory / "points3D.txt", "w") as fh:
            fh.write("# 3D point list with one line of data per point:\n")
            for i, (p, c) in enumerate(zip(model.points.positions, rgb)):
                xyz = " ".join(repr(float(v)) for v in p)
                fh.write(f"{i + 1} {xyz} {c[0]} {c[1]} {c[2]} 0.0\n")
    elif format == "binary":
        with open(directory / "cameras.bin", "wb") as fh:
            fh.write(struct.pack("<Q", len(model.cameras)))
            for cid, cam in zip(cam_ids, model.cameras):
                name, params = _camera_params(cam)
                fh.write(struct.pack("<iiQQ", cid, CAMERA_MODELS[name][0], cam.width, cam.height))
                fh.write(struct.pack("<" + "d" * len(params), *params))
        with open(directory / "images.bin", "wb") as fh:
            fh.write(struct.pack("<Q", len(model.image_records)))
            for i, (rec, q) in enumerate(zip(model.image_records, qvecs)):
                image_id = rec.image_id or i + 1
                fh.write(struct.pack("<idddddddi", image_id, *q, *rec.translation, cam_ids[rec.camera_index]))
                fh.write(rec.name.encode("utf-8") + b"\x00")
                fh.write(struct.pack("<Q", 0))
        with open(directory / "points3D.bin", "wb") as fh:
            fh.write(struct.pack("<Q", len(model.points)))
            for i, (p, c) in enumerate(zip(model.points.positions, rgb)):
                fh.write(struct.pack("<QdddBBBd", i + 1, *p, *c, 0.0))
                fh.write(struct.pack("<Q", 0))
    else:
        raise ValueError(f"format must be text or binary, got {format!r}")
