import numba
import numpy as np
import pytest

from gradcheck import check_gradients
from oracles import composite_back_to_front, composite_reference, project_reference
from sparsesplat.camera import CameraModel
from sparsesplat.rasterize import project_gaussian, project_gaussians, render, render_backward
from sparsesplat.scene import GaussianPrimitive, Scene, sigmoid
from sparsesplat.sh import rgb_to_sh_dc

BG = (0.1, 0.2, 0.3)


def random_scene(rng, n, degree=3, opacity=(-2.0, 1.5), scale=(0.05, 0.3), smoothing=True):
    sh = rng.normal(scale=0.1, size=(n, 3, (degree + 1) ** 2))
    sh[:, :, 0] = rng.uniform(0, 1.5, (n, 3))
    return Scene(rng.uniform(-1, 1, (n, 3)), rng.normal(size=(n, 4)), np.log(rng.uniform(*scale, (n, 3))),
                 rng.uniform(*opacity, n), sh, smoothing_state=rng.uniform(20, 60, n) if smoothing else None)


def random_camera(rng, size=(64, 64)):
    eye = rng.normal(size=3)
    eye = 4.0 * eye / np.linalg.norm(eye)
    return CameraModel.look_at(eye, rng.uniform(-0.2, 0.2, 3), [0, 1, 0], tuple(rng.uniform(40, 90, 2)), size)


def reference_render(scene, cam, background=BG, s_filter=0.2):
    zeta = scene.smoothing_state
    splats = project_reference(scene.centers, scene.rotations, scene.log_scales, scene.opacity_logits,
                               scene.sh_coeffs, cam.rotation, cam.translation, cam.focal, cam.size, zeta,
                               s_filter if zeta is not None else 0.0)
    return splats, composite_reference(splats, *cam.size, background)


def primitive_over_pixel(depth, opacity, rgb, pixel=(8, 8), f=10.0, scale=0.05):
    # mean2d = f x / z + W/2 lands on the pixel center (j + 0.5, i + 0.5) of a 16x16 image
    x = (pixel[0] + 0.5 - 8.0) * depth / f
    y = (pixel[1] + 0.5 - 8.0) * depth / f
    logit = np.log(opacity / (1 - opacity))
    return GaussianPrimitive(np.array([x, y, depth]), np.array([1.0, 0, 0, 0]), np.full(3, np.log(scale)), logit,
                             rgb_to_sh_dc(np.asarray(rgb, dtype=float))[:, None])


CAM16 = CameraModel(np.eye(3), np.zeros(3), (10.0, 10.0), (16, 16))


class TestProjectGaussian:
    def test_isotropic_on_axis(self):
        g = GaussianPrimitive(np.array([0.0, 0, 4]), np.array([1.0, 0, 0, 0]), np.full(3, np.log(0.5)), 0.0,
                              np.zeros((3, 1)))
        cam = CameraModel(np.eye(3), np.zeros(3), (100.0, 100.0), (64, 64))
        splat = project_gaussian(g, cam, filter_strength=0.0)
        np.testing.assert_allclose(splat.cov2d, (100 * 0.5 / 4) ** 2 * np.eye(2) + 0.3 * np.eye(2), rtol=1e-12)
        np.testing.assert_allclose(splat.mean2d, [32, 32])
        assert splat.depth == 4.0

    def test_behind_camera_is_culled(self):
        g = GaussianPrimitive(np.array([0.0, 0, -1]), np.array([1.0, 0, 0, 0]), np.zeros(3), 0.0, np.zeros((3, 1)))
        assert project_gaussian(g, CAM16) is None

    def test_outside_margin_is_culled(self):
        g = GaussianPrimitive(np.array([50.0, 0, 1]), np.array([1.0, 0, 0, 0]), np.full(3, -3.0), 0.0,
                              np.zeros((3, 1)))
        assert project_gaussian(g, CAM16) is None

    def test_covariance_matches_numerical_jacobian(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            cam = random_camera(rng)
            scene = random_scene(rng, 1, degree=0, smoothing=False)
            scene.centers[0] = rng.uniform(-0.5, 0.5, 3)
            splat = project_gaussian(scene.gaussians[0], cam, filter_strength=0.0)
            e0 = cam.world_to_camera(scene.centers[0])

            def perspective(e):
                return np.array([cam.focal[0] * e[0] / e[2] + cam.principal[0],
                                 cam.focal[1] * e[1] / e[2] + cam.principal[1]])

            h = 1e-5
            J = np.stack([(perspective(e0 + h * d) - perspective(e0 - h * d)) / (2 * h) for d in np.eye(3)], axis=1)
            cov3d = scene.gaussians[0].covariance
            M = J @ cam.rotation
            expected = M @ cov3d @ M.T + 0.3 * np.eye(2)
            assert np.abs(splat.cov2d - expected).max() / np.abs(expected).max() < 1e-4

    def test_smoothing_widens_and_dims(self):
        g = GaussianPrimitive(np.array([0.0, 0, 2]), np.array([1.0, 0, 0, 0]), np.full(3, np.log(0.01)), 0.0,
                              np.zeros((3, 1)))
        plain = project_gaussian(g, CAM16, filter_strength=0.0)
        smooth = project_gaussian(g, CAM16, zeta=5.0, filter_strength=0.2)
        assert smooth.cov2d[0, 0] > plain.cov2d[0, 0]
        assert smooth.opacity < plain.opacity

    def test_matches_reference_projection(self):
        rng = np.random.default_rng(1)
        scene = random_scene(rng, 100)
        cam = random_camera(rng)
        ours = project_gaussians(scene, cam)
        ref, _ = reference_render(scene, cam)
        assert len(ours) == len(ref)
        ours = sorted(ours, key=lambda s: s.depth)
        ref = sorted(ref, key=lambda s: s.depth)
        for a, b in zip(ours, ref):
            np.testing.assert_allclose(a.mean2d, b.mean2d, atol=1e-9)
            np.testing.assert_allclose(a.cov2d, b.cov2d, rtol=1e-9, atol=1e-9)
            np.testing.assert_allclose(a.color, b.color, atol=1e-12)
            assert a.opacity == pytest.approx(b.opacity, abs=1e-12)


class TestRenderExamples:
    def test_single_splat_over_pixel(self):
        scene = Scene.from_gaussians([primitive_over_pixel(2.0, 0.9, (1, 0, 0))])
        out = render(scene, CAM16, (0, 0, 0), filter_strength=0.0)
        np.testing.assert_allclose(out.color[8, 8], [0.9, 0, 0], atol=1e-12)
        assert out.depth[8, 8] == pytest.approx(0.9 * 2.0, abs=1e-12)
        assert out.alpha[8, 8] == pytest.approx(0.9, abs=1e-12)
        assert out.per_pixel_contrib_count[8, 8] == 1

    def test_two_stacked_splats(self):
        c1, c2, bg = np.array([1.0, 0.2, 0]), np.array([0, 0.4, 1.0]), np.array([0.3, 0.3, 0.3])
        scene = Scene.from_gaussians([primitive_over_pixel(3.0, 0.5, c2), primitive_over_pixel(2.0, 0.5, c1)])
        out = render(scene, CAM16, bg, filter_strength=0.0)
        np.testing.assert_allclose(out.color[8, 8], 0.5 * c1 + 0.25 * c2 + 0.25 * bg, atol=1e-12)
        assert out.depth[8, 8] == pytest.approx(0.5 * 2.0 + 0.25 * 3.0, abs=1e-12)

    def test_empty_scene_is_background(self):
        out = render(Scene.empty(), CAM16, BG)
        np.testing.assert_array_equal(out.color, np.broadcast_to(BG, (16, 16, 3)))
        np.testing.assert_array_equal(out.depth, 0)
        np.testing.assert_array_equal(out.alpha, 0)

    def test_sigma_clamp(self):
        scene = Scene.from_gaussians([primitive_over_pixel(2.0, 0.99999, (1, 1, 1))])
        out = render(scene, CAM16, (0, 0, 0), filter_strength=0.0)
        assert out.alpha[8, 8] == pytest.approx(0.999, abs=1e-12)

    def test_transmittance_cutoff(self):
        # each splat leaves 0.001 transmittance: the third starts below 1e-4 and is skipped
        g = [primitive_over_pixel(2.0 + i, 0.99999, (1, 1, 1)) for i in range(3)]
        out = render(Scene.from_gaussians(g), CAM16, (0, 0, 0), filter_strength=0.0)
        assert out.per_pixel_contrib_count[8, 8] == 2
        assert out.alpha[8, 8] == pytest.approx(1 - 1e-6, abs=1e-12)


class TestRenderOracle:
    @pytest.mark.parametrize("seed", range(4))
    def test_matches_bruteforce(self, seed):
        rng = np.random.default_rng(100 + seed)
        scene = random_scene(rng, 200)
        cam = random_camera(rng)
        out = render(scene, cam, BG)
        _, (C, D, A, n) = reference_render(scene, cam)
        assert np.abs(out.color - C).max() <= 1e-6
        assert np.abs(out.depth - D).max() <= 1e-6
        assert np.abs(out.alpha - A).max() <= 1e-6
        np.testing.assert_array_equal(out.per_pixel_contrib_count, n)

    def test_non_square_with_principal_point(self):
        rng = np.random.default_rng(7)
        scene = random_scene(rng, 150, smoothing=False)
        cam = random_camera(rng, size=(70, 41))
        out = render(scene, cam, BG)
        _, (C, D, _, _) = reference_render(scene, cam)
        assert np.abs(out.color - C).max() <= 1e-6
        assert np.abs(out.depth - D).max() <= 1e-6

    def test_back_to_front_agrees(self):
        rng = np.random.default_rng(8)
        # low opacities keep transmittance above the cutoff everywhere
        scene = random_scene(rng, 120, opacity=(-4.0, -1.5))
        cam = random_camera(rng)
        out = render(scene, cam, BG)
        assert (1 - out.alpha).min() > 1e-4
        C, D = composite_back_to_front(project_gaussians(scene, cam), *cam.size, BG)
        assert np.abs(out.color - C).max() <= 1e-6
        assert np.abs(out.depth - D).max() <= 1e-6


class TestRenderProperties:
    def test_alpha_range_and_background(self):
        rng = np.random.default_rng(9)
        scene = random_scene(rng, 60)
        cam = random_camera(rng)
        out = render(scene, cam, BG)
        assert out.alpha.min() >= 0 and out.alpha.max() <= 1
        empty = out.alpha == 0
        assert empty.any()
        np.testing.assert_array_equal(out.color[empty], np.broadcast_to(BG, (empty.sum(), 3)))
        np.testing.assert_array_equal(out.depth[empty], 0)

    def test_depth_invariant_to_color(self):
        rng = np.random.default_rng(10)
        scene = random_scene(rng, 80)
        cam = random_camera(rng)
        a = render(scene, cam, BG)
        other = scene.copy()
        other.sh_coeffs += rng.normal(scale=0.3, size=other.sh_coeffs.shape)
        b = render(other, cam, BG)
        np.testing.assert_array_equal(a.depth, b.depth)
        assert not np.array_equal(a.color, b.color)

    def test_deterministic_across_thread_counts(self):
        rng = np.random.default_rng(11)
        scene = random_scene(rng, 300)
        cam = random_camera(rng, size=(96, 80))
        g_img = rng.normal(size=(80, 96, 3))
        previous = numba.get_num_threads()
        results = []
        try:
            # repeated runs at every thread count must agree bit for bit
            for threads in sorted({1, numba.config.NUMBA_NUM_THREADS}) * 2:
                numba.set_num_threads(threads)
                out = render(scene, cam, BG)
                grads = render_backward(scene, cam, g_img, out.depth, BG)
                results.append((out.color, out.depth, grads.centers, grads.sh_coeffs))
        finally:
            numba.set_num_threads(previous)
        for other in results[1:]:
            for x, y in zip(results[0], other):
                np.testing.assert_array_equal(x, y)


class TestRenderBackward:
    def test_zero_upstream_gives_zero(self):
        rng = np.random.default_rng(12)
        scene = random_scene(rng, 30)
        cam = random_camera(rng, size=(32, 32))
        grads = render_backward(scene, cam, np.zeros((32, 32, 3)), np.zeros((32, 32)), BG)
        for value in grads.as_dict().values():
            np.testing.assert_array_equal(value, 0)

    def test_single_splat_opacity(self):
        g = primitive_over_pixel(2.0, 0.6, (0.7, 0.2, 0.1))
        scene = Scene.from_gaussians([g])
        upstream = np.zeros((16, 16, 3))
        upstream[8, 9, 0] = 1.0
        grads = render_backward(scene, CAM16, upstream, None, (0, 0, 0), filter_strength=0.0)
        splat = project_gaussian(g, CAM16, filter_strength=0.0)
        d = np.array([9.5, 8.5]) - splat.mean2d
        G = np.exp(-0.5 * d @ np.linalg.solve(splat.cov2d, d))
        s = sigmoid(g.opacity_logit)
        # dC/d(opacity) = G * color, chained through the sigmoid
        assert grads.opacity_logits[0] == pytest.approx(G * 0.7 * s * (1 - s), rel=1e-12)

    def test_shape_mismatch(self):
        scene = random_scene(np.random.default_rng(0), 3)
        with pytest.raises(ValueError):
            render_backward(scene, CAM16, np.zeros((8, 8, 3)))
        with pytest.raises(ValueError):
            render_backward(scene, CAM16, np.zeros((16, 16, 3)), np.zeros((8, 8)))

    @pytest.mark.parametrize("seed", range(2))
    def test_matches_finite_differences(self, seed):
        rng = np.random.default_rng(20 + seed)
        scene = random_scene(rng, 20)
        cam = random_camera(rng, size=(32, 32))
        w_color = rng.normal(size=(32, 32, 3))
        w_depth = rng.normal(size=(32, 32))

        def objective(s):
            out = render(s, cam, BG)
            return float(np.sum(out.color * w_color) + np.sum(out.depth * w_depth))

        grads = render_backward(scene, cam, w_color, w_depth, BG)
        report = check_gradients(scene, objective, grads.as_dict())
        assert report.failures == []
        assert report.skipped_fraction < 0.05
