import numpy as np
import pytest
from PIL import Image

from sparsesplat.camera import CameraModel
from sparsesplat.io.colmap import (
    ColmapParseError,
    UnsupportedCameraModelError,
    load_colmap_model,
    write_colmap_model,
)
from sparsesplat.io.depth import (
    DepthFormatError,
    InvalidDepthError,
    load_depth_map,
    normalize_depth,
    read_pfm,
    write_pfm,
    write_png16,
)
from sparsesplat.io.ply import PlySchemaError, bake_smoothing, read_ply, read_pointcloud_ply, write_ply, \
    write_pointcloud_ply
from sparsesplat.pointcloud import PointCloud
from sparsesplat.rasterize import render
from sparsesplat.synthetic import camera_ring, model_from_cameras, random_scene

FIXTURE_CAMERAS = """# Camera list with one line of data per camera:
#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]
1 SIMPLE_PINHOLE 640 480 500 320 240
"""
FIXTURE_IMAGES = """# Image list with two lines of data per image:
1 1 0 0 0 0 0 0 1 frame_000.png
10.5 20.5 -1
"""
FIXTURE_POINTS = """# 3D point list
1 0.5 -0.25 3.0 255 128 0 0.5 1 0
2 -1.0 2.0 5.5 0 0 255 0.1
"""


def write_fixture(directory, cameras=FIXTURE_CAMERAS, images=FIXTURE_IMAGES, points=FIXTURE_POINTS):
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "cameras.txt").write_text(cameras)
    (directory / "images.txt").write_text(images)
    (directory / "points3D.txt").write_text(points)
    return directory


class TestColmap:
    def test_text_fixture(self, tmp_path):
        model = load_colmap_model(write_fixture(tmp_path / "m"))
        assert len(model.cameras) == 1
        assert model.cameras[0].focal == (500.0, 500.0)
        assert model.cameras[0].size == (640, 480)
        assert len(model.points) == 2
        np.testing.assert_allclose(model.points.positions[0], [0.5, -0.25, 3.0])
        np.testing.assert_allclose(model.points.colors[0], [1.0, 128 / 255, 0.0])
        cam = model.view("frame_000.png")
        np.testing.assert_array_equal(cam.rotation, np.eye(3))
        np.testing.assert_array_equal(cam.translation, np.zeros(3))
        assert model.warnings == []

    def test_empty_points_flagged(self, tmp_path):
        model = load_colmap_model(write_fixture(tmp_path / "m", points="# none\n"))
        assert len(model.points) == 0
        assert model.empty_points
        assert model.warnings

    def test_text_binary_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        cams = camera_ring(5, size=(96, 72))
        cloud = PointCloud(rng.standard_normal((40, 3)), rng.integers(0, 256, (40, 3)) / 255.0)
        model = model_from_cameras(cams, cloud)
        write_colmap_model(model, tmp_path / "txt", format="text")
        write_colmap_model(model, tmp_path / "bin", format="binary")
        a = load_colmap_model(tmp_path / "txt")
        b = load_colmap_model(tmp_path / "bin")
        assert a.view_names == b.view_names == sorted(c.name for c in cams)
        for va, vb in zip(a.views(), b.views()):
            np.testing.assert_allclose(va.rotation, vb.rotation, atol=1e-6)
            np.testing.assert_allclose(va.translation, vb.translation, atol=1e-6)
            np.testing.assert_allclose(va.focal, vb.focal, atol=1e-6)
            np.testing.assert_allclose(va.principal, vb.principal, atol=1e-6)
            assert va.size == vb.size
        np.testing.assert_allclose(a.points.positions, b.points.positions, atol=1e-6)
        np.testing.assert_allclose(a.points.colors, b.points.colors, atol=1e-6)
        # and both equal the source
        for cam in cams:
            np.testing.assert_allclose(b.view(cam.name).rotation, cam.rotation, atol=1e-6)
            np.testing.assert_allclose(b.view(cam.name).center, cam.center, atol=1e-6)

    def test_rotations_orthonormal(self, tmp_path):
        images = "1 0.9 0.1 0.2 0.3 1 2 3 1 a.png\n\n2 0.5 0.5 -0.5 0.5 0 0 1 1 b.png\n\n"
        model = load_colmap_model(write_fixture(tmp_path / "m", images=images))
        for cam in model.views():
            assert np.abs(cam.rotation.T @ cam.rotation - np.eye(3)).max() <= 1e-5

    def test_unsupported_model_named(self, tmp_path):
        d = write_fixture(tmp_path / "m", cameras="1 OPENCV 640 480 500 500 320 240 0.1 0.01 0 0\n")
        with pytest.raises(UnsupportedCameraModelError, match="OPENCV"):
            load_colmap_model(d)

    def test_simple_radial_drops_distortion(self, tmp_path):
        d = write_fixture(tmp_path / "m", cameras="1 SIMPLE_RADIAL 640 480 500 320 240 0.05\n")
        model = load_colmap_model(d)
        assert model.cameras[0].focal == (500.0, 500.0)
        assert any("SIMPLE_RADIAL" in w for w in model.warnings)

    def test_malformed_reports_line(self, tmp_path):
        d = write_fixture(tmp_path / "m", points="# header\n1 0.5 oops 3.0 255 128 0 0.5\n")
        with pytest.raises(ColmapParseError, match=r"points3D.txt:2"):
            load_colmap_model(d)

    def test_truncated_binary_reports_offset(self, tmp_path):
        model = model_from_cameras(camera_ring(2), PointCloud(np.zeros((3, 3)), np.zeros((3, 3))))
        write_colmap_model(model, tmp_path / "bin", format="binary")
        path = tmp_path / "bin" / "points3D.bin"
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(ColmapParseError, match="byte offset"):
            load_colmap_model(tmp_path / "bin")

    def test_missing_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_colmap_model(tmp_path / "nothing")

    def test_unknown_view_lists_names(self, tmp_path):
        model = load_colmap_model(write_fixture(tmp_path / "m"))
        with pytest.raises(KeyError, match="frame_000.png"):
            model.view("other.png")


class TestDepth:
    def test_pfm_normalized(self, tmp_path):
        write_pfm(tmp_path / "d.pfm", np.array([[1.0, 2.0], [3.0, 4.0]]))
        d = load_depth_map(tmp_path / "d.pfm")
        np.testing.assert_allclose(d.values, [[0, 1 / 3], [2 / 3, 1]], atol=1e-7)
        assert d.normalized

    def test_pfm_round_trip_orientation(self, tmp_path):
        v = np.arange(12, dtype=np.float64).reshape(3, 4)
        write_pfm(tmp_path / "d.pfm", v)
        np.testing.assert_array_equal(read_pfm(tmp_path / "d.pfm"), v)

    def test_constant_map_is_zero(self, tmp_path):
        write_pfm(tmp_path / "d.pfm", np.full((4, 5), 7.0))
        d = load_depth_map(tmp_path / "d.pfm")
        np.testing.assert_array_equal(d.values, 0.0)
        assert d.normalized

    def test_png16_ramp_downsampled(self, tmp_path):
        ramp = np.tile(np.arange(64) / 63.0, (32, 1))
        write_png16(tmp_path / "r.png", ramp)
        d = load_depth_map(tmp_path / "r.png", target_size=(32, 16))
        # pixel-center aligned 2x bilinear: output j samples input 2j + 0.5
        expected = np.tile((2 * np.arange(32) + 0.5 - 0.5) / 62.0, (16, 1))
        np.testing.assert_allclose(d.values, expected, atol=1e-3)

    def test_nan_pixels_become_far(self, tmp_path):
        v = np.array([[1.0, np.nan], [2.0, 3.0]])
        write_pfm(tmp_path / "d.pfm", v)
        np.testing.assert_allclose(load_depth_map(tmp_path / "d.pfm").values, [[0, 1], [0.5, 1]])

    def test_all_nan_rejected(self, tmp_path):
        write_pfm(tmp_path / "d.pfm", np.full((2, 2), np.nan))
        with pytest.raises(InvalidDepthError):
            load_depth_map(tmp_path / "d.pfm")

    def test_unreadable(self, tmp_path):
        (tmp_path / "d.png").write_bytes(b"not an image")
        with pytest.raises(DepthFormatError):
            load_depth_map(tmp_path / "d.png")
        (tmp_path / "d.pfm").write_bytes(b"P6\n1 1\n255\n")
        with pytest.raises(DepthFormatError):
            load_depth_map(tmp_path / "d.pfm")

    def test_rgb_png_rejected(self, tmp_path):
        Image.fromarray(np.zeros((4, 4, 3), dtype=np.uint8)).save(tmp_path / "c.png")
        with pytest.raises(DepthFormatError):
            load_depth_map(tmp_path / "c.png")

    def test_normalize_idempotent(self):
        v = np.random.default_rng(1).random((8, 9)) * 5 + 2
        once = normalize_depth(v)
        np.testing.assert_allclose(normalize_depth(once), once, atol=1e-15)


def assert_scenes_close(a, b, atol=1e-6):
    for name in ("centers", "rotations", "log_scales", "opacity_logits", "sh_coeffs"):
        np.testing.assert_allclose(getattr(a, name), getattr(b, name), atol=atol, rtol=0, err_msg=name)
    assert a.sh_degree == b.sh_degree


class TestPly:
    def test_single_gaussian_round_trip(self, tmp_path):
        scene = random_scene(1, np.random.default_rng(0), sh_degree=3)
        write_ply(scene, tmp_path / "s.ply")
        assert_scenes_close(read_ply(tmp_path / "s.ply"), scene)

    def test_degree_zero_writes_zero_rest(self, tmp_path):
        scene = random_scene(3, np.random.default_rng(1), sh_degree=0)
        write_ply(scene, tmp_path / "s.ply")
        back = read_ply(tmp_path / "s.ply")
        assert back.sh_degree == 0
        names, data = _raw_vertices(tmp_path / "s.ply")
        assert [f"f_rest_{i}" for i in range(45)] == [n for n in names if n.startswith("f_rest")]
        for i in range(45):
            np.testing.assert_array_equal(data[f"f_rest_{i}"], 0)

    def test_large_random_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        scene = random_scene(10_000, rng, sh_degree=3)
        scene.log_scales = rng.uniform(-8, 2, scene.log_scales.shape)
        scene.opacity_logits = rng.uniform(-6, 6, len(scene))
        write_ply(scene, tmp_path / "s.ply")
        assert_scenes_close(read_ply(tmp_path / "s.ply"), scene)

    def test_3dgs_property_layout(self, tmp_path):
        write_ply(random_scene(2, np.random.default_rng(3), sh_degree=1), tmp_path / "s.ply")
        names, _ = _raw_vertices(tmp_path / "s.ply")
        expected = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
        expected += [f"f_rest_{i}" for i in range(45)]
        expected += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
        assert names == expected
        header = (tmp_path / "s.ply").read_bytes().split(b"end_header")[0]
        assert b"format binary_little_endian 1.0" in header

    def test_smoothing_state_round_trip(self, tmp_path):
        scene = random_scene(4, np.random.default_rng(4))
        scene.smoothing_state = np.array([10.0, 20.0, 30.0, 40.0])
        write_ply(scene, tmp_path / "s.ply")
        np.testing.assert_allclose(read_ply(tmp_path / "s.ply").smoothing_state, scene.smoothing_state)

    def test_baked_scene_renders_the_same(self, tmp_path):
        rng = np.random.default_rng(5)
        scene = random_scene(30, rng)
        scene.smoothing_state = rng.uniform(5, 30, 30)
        cam = camera_ring(1, size=(48, 48))[0]
        baked = bake_smoothing(scene, 0.2)
        assert baked.smoothing_state is None
        np.testing.assert_allclose(render(baked, cam).color, render(scene, cam, filter_strength=0.2).color,
                                   atol=1e-10)

    def test_missing_property_named(self, tmp_path):
        header = "ply\nformat ascii 1.0\nelement vertex 1\n"
        props = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "scale_0", "scale_1", "scale_2",
                 "rot_0", "rot_1", "rot_2", "rot_3"]
        header += "".join(f"property float {p}\n" for p in props) + "end_header\n"
        (tmp_path / "bad.ply").write_text(header + " ".join(["0.5"] * len(props)) + "\n")
        with pytest.raises(PlySchemaError, match="opacity"):
            read_ply(tmp_path / "bad.ply")

    def test_empty_scene_rejected(self, tmp_path):
        from sparsesplat.scene import Scene

        with pytest.raises(ValueError):
            write_ply(Scene.empty(), tmp_path / "e.ply")

    def test_pointcloud_round_trip(self, tmp_path):
        rng = np.random.default_rng(6)
        cloud = PointCloud(rng.standard_normal((20, 3)), rng.integers(0, 256, (20, 3)) / 255.0)
        write_pointcloud_ply(cloud, tmp_path / "p.ply")
        back = read_pointcloud_ply(tmp_path / "p.ply")
        np.testing.assert_allclose(back.positions, cloud.positions, atol=1e-6)
        np.testing.assert_allclose(back.colors, cloud.colors, atol=1e-12)


def _raw_vertices(path):
    data = path.read_bytes()
    head, body = data.split(b"end_header\n", 1)
    names = [line.split()[-1].decode() for line in head.splitlines() if line.startswith(b"property")]
    arr = np.frombuffer(body, dtype=[(n, "<f4") for n in names])
    return names, arr


class TestCameraValidation:
    def test_non_orthonormal_rejected(self):
        with pytest.raises(ValueError):
            CameraModel(np.diag([1.0, 1.0, 1.1]), np.zeros(3), (1, 1), (2, 2))

    def test_bad_intrinsics_rejected(self):
        with pytest.raises(ValueError):
            CameraModel(np.eye(3), np.zeros(3), (0, 1), (2, 2))
        with pytest.raises(ValueError):
            CameraModel(np.eye(3), np.zeros(3), (1, 1), (0, 2))
