"""Gaussian scene PLY files in the layout used by 3DGS viewers.

Per vertex: ``x y z nx ny nz f_dc_0..2 f_rest_0..44 opacity scale_0..2
rot_0..3`` as little-endian float32. Opacity is stored as a logit, scales
as logs, rotation as (w, x, y, z). ``f_rest`` is channel-major: coefficient
``b`` (1..15) of channel ``c`` lives in ``f_rest_{c * 15 + b - 1}``.
The active SH degree is kept in a header comment so that low-degree
scenes round-trip exactly; smoothing frequencies, when present, are
stored in an extra ``zeta`` property that viewers ignore.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..pointcloud import PointCloud
from ..scene import Scene, logit, sigmoid
from ..smoothing import filter_variance

N_REST = 45
_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
REQUIRED = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2",
            "rot_0", "rot_1", "rot_2", "rot_3"]


class PlySchemaError(ValueError):
    pass


def _property_names(with_zeta: bool):
    names = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(N_REST)]
    names += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    if with_zeta:
        names.append("zeta")
    return names


def bake_smoothing(scene: Scene, filter_strength: float) -> Scene:
    """Fold the 3D smoothing filter into scales and opacities.

    The result renders identically without a smoothing state, which is what
    third-party viewers need.
    """
    if scene.smoothing_state is None:
        return scene.copy()
    var = filter_variance(scene.smoothing_state, filter_strength)[:, None]
    s2 = np.exp(2.0 * scene.log_scales)
    s2f = s2 + var
    factor = np.sqrt(np.prod(s2 / s2f, axis=1))
    out = scene.copy()
    out.log_scales = 0.5 * np.log(s2f)
    out.opacity_logits = logit(np.clip(sigmoid(scene.opacity_logits) * factor, 1e-12, 1 - 1e-12))
    out.smoothing_state = None
    return out


def write_ply(scene: Scene, path, bake_filter_strength: float = None) -> None:
    """Write ``scene`` as binary little-endian PLY.

    With ``bake_filter_strength`` set, the smoothing filter is folded into
    the stored parameters (see :func:`bake_smoothing`).
    """
    if len(scene) == 0:
        raise ValueError("refusing to write an empty scene")
    if bake_filter_strength is not None:
        scene = bake_smoothing(scene, bake_filter_strength)
    n = len(scene)
    with_zeta = scene.smoothing_state is not None
    names = _property_names(with_zeta)
    data = np.zeros(n, dtype=[(name, "<f4") for name in names])
    for i, axis in enumerate("xyz"):
        data[axis] = scene.centers[:, i]
    b = scene.sh_coeffs.shape[2]
    for c in range(3):
        data[f"f_dc_{c}"] = scene.sh_coeffs[:, c, 0]
        for k in range(1, b):
            data[f"f_rest_{c * 15 + k - 1}"] = scene.sh_coeffs[:, c, k]
    data["opacity"] = scene.opacity_logits
    for i in range(3):
        data[f"scale_{i}"] = scene.log_scales[:, i]
    for i in range(4):
        data[f"rot_{i}"] = scene.rotations[:, i]
    if with_zeta:
        data["zeta"] = scene.smoothing_state

    header = ["ply", "format binary_little_endian 1.0", f"comment sh_degree {scene.sh_degree}", f"element vertex {n}"]
    header += [f"property float {name}" for name in names]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())


def _parse_header(fh, path):
    if fh.readline().strip() != b"ply":
        raise PlySchemaError(f"{path}: not a PLY file")
    fmt = None
    sh_degree = None
    elements = []
    while True:
        line = fh.readline()
        if not line:
            raise PlySchemaError(f"{path}: missing end_header")
        parts = line.decode("ascii", "replace").split()
        if not parts:
            continue
        if parts[0] == "end_header":
            break
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "comment" and len(parts) >= 3 and parts[1] == "sh_degree":
            sh_degree = int(parts[2])
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if parts[1] == "list":
                raise PlySchemaError(f"{path}: list properties are not supported")
            if parts[1] not in _PLY_TYPES:
                raise PlySchemaError(f"{path}: unknown property type {parts[1]}")
            elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
    return fmt, sh_degree, elements


def _read_vertices(path: Path):
    with open(path, "rb") as fh:
        fmt, sh_degree, elements = _parse_header(fh, path)
        vertex = [e for e in elements if e[0] == "vertex"]
        if not vertex:
            raise PlySchemaError(f"{path}: no vertex element")
        if elements[0][0] != "vertex":
            raise PlySchemaError(f"{path}: vertex must be the first element")
        _, n, props = vertex[0]
        if fmt in ("binary_little_endian", "binary_big_endian"):
            order = "<" if fmt == "binary_little_endian" else ">"
            dtype = np.dtype([(name, order + t) for name, t in props])
            raw = fh.read(dtype.itemsize * n)
            if len(raw) < dtype.itemsize * n:
                raise PlySchemaError(f"{path}: file truncated")
            data = np.frombuffer(raw, dtype=dtype, count=n)
        elif fmt == "ascii":
            rows = np.loadtxt(fh, max_rows=n, ndmin=2)
            data = {name: rows[:, i] for i, (name, _) in enumerate(props)}
        else:
            raise PlySchemaError(f"{path}: unsupported format {fmt}")
    return n, {name: t for name, t in props}, data, sh_degree


def read_ply(path) -> Scene:
    """Read a Gaussian PLY written by :func:`write_ply` or a 3DGS-compatible tool."""
    path = Path(path)
    n, types, data, sh_degree = _read_vertices(path)
    names = set(types)
    for req in REQUIRED:
        if req not in names:
            raise PlySchemaError(f"{path}: missing required property {req!r}")
    n_rest = sum(1 for nm in names if nm.startswith("f_rest_"))
    per_channel = {0: 0, 9: 3, 24: 8, 45: 15}.get(n_rest)
    if per_channel is None:
        raise PlySchemaError(f"{path}: unexpected number of f_rest properties ({n_rest})")
    for i in range(n_rest):
        if f"f_rest_{i}" not in names:
            raise PlySchemaError(f"{path}: missing required property 'f_rest_{i}'")

    col = lambda name: np.asarray(data[name], dtype=np.float64)  # noqa: E731
    file_basis = per_channel + 1
    sh = np.zeros((n, 3, file_basis))
    for c in range(3):
        sh[:, c, 0] = col(f"f_dc_{c}")
        for k in range(1, file_basis):
            sh[:, c, k] = col(f"f_rest_{c * per_channel + k - 1}")
    if sh_degree is not None:
        sh = sh[:, :, : (sh_degree + 1) ** 2]
    return Scene(
        centers=np.stack([col("x"), col("y"), col("z")], axis=1),
        rotations=np.stack([col(f"rot_{i}") for i in range(4)], axis=1),
        log_scales=np.stack([col(f"scale_{i}") for i in range(3)], axis=1),
        opacity_logits=col("opacity"),
        sh_coeffs=sh,
        smoothing_state=col("zeta") if "zeta" in names else None,
    )


def write_pointcloud_ply(cloud: PointCloud, path) -> None:
    """Plain point cloud: float ``x y z`` plus uchar ``red green blue`` when colored."""
    fields = [(a, "<f4") for a in "xyz"]
    if cloud.colors is not None:
        fields += [(c, "u1") for c in ("red", "green", "blue")]
    data = np.zeros(len(cloud), dtype=fields)
    for i, a in enumerate("xyz"):
        data[a] = cloud.positions[:, i]
    if cloud.colors is not None:
        q = np.clip(np.round(cloud.colors * 255.0), 0, 255).astype(np.uint8)
        for i, c in enumerate(("red", "green", "blue")):
            data[c] = q[:, i]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(cloud)}"]
    header += [f"property {'float' if t == '<f4' else 'uchar'} {name}" for name, t in fields]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())


def read_pointcloud_ply(path) -> PointCloud:
    """Read positions and optional colors (uchar scaled by 1/255, floats kept) from any vertex PLY."""
    path = Path(path)
    _, types, data, _ = _read_vertices(path)
    for req in "xyz":
        if req not in types:
            raise PlySchemaError(f"{path}: missing required property {req!r}")
    positions = np.stack([np.asarray(data[a], dtype=np.float64) for a in "xyz"], axis=1)
    colors = None
    if all(c in types for c in ("red", "green", "blue")):
        colors = np.stack([np.asarray(data[c], dtype=np.float64) for c in ("red", "green", "blue")], axis=1)
        if types["red"] in ("u1", "i1"):
            colors = colors / 255.0
        elif types["red"] in ("u2", "i2"):
            colors = colors / 65535.0
    return PointCloud(positions, colors)
