import numpy as np
import pytest
import torch

from surfelcontact.geometry import Camera, quat_to_rotmat
from surfelcontact.gradcheck import TOLERANCE, check_render, random_scene
from surfelcontact.raster import render, render_backward, ray_splat_intersect
from surfelcontact.raster.autograd import RenderContext, rasterize

IDQ = [1.0, 0.0, 0.0, 0.0]


def _cam(w=21, h=21, f=40.0):
    # at the origin looking down +z, camera frame == world frame
    return Camera.look_at([0.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0], f, f, w, h)


def _stack(z, op_logit, cols, scale=1.0):
    n = len(z)
    means = np.stack([np.zeros(n), np.zeros(n), np.asarray(z, dtype=float)], -1)
    quats = np.tile(IDQ, (n, 1))
    ls = np.full((n, 2), np.log(scale))
    return [means, quats, ls, np.asarray(op_logit, dtype=float), np.asarray(cols, dtype=float)]


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


class TestRaySplat:
    def test_head_on(self):
        u, v, t = ray_splat_intersect([0, 0, 0], IDQ, [0.0, 0.0], [0, 0, -1], [0, 0, 1])
        assert (u, v, t) == pytest.approx((0.0, 0.0, 1.0), abs=1e-15)

    def test_one_sigma_offset(self):
        su = 0.3
        u, v, t = ray_splat_intersect([0, 0, 0], IDQ, np.log([su, 0.5]), [su, 0, -1], [0, 0, 1])
        assert u == pytest.approx(1.0, abs=1e-12) and v == pytest.approx(0.0, abs=1e-15)

    def test_parallel_and_behind_miss(self):
        assert ray_splat_intersect([0, 0, 0], IDQ, [0.0, 0.0], [0, 0, -1], [1, 0, 0]) is None
        assert ray_splat_intersect([0, 0, 0], IDQ, [0.0, 0.0], [0, 0, 1], [0, 0, 1]) is None
        assert ray_splat_intersect([0, 0, 0.005], IDQ, [0.0, 0.0], [0, 0, 0], [0, 0, 1]) is None

    def test_plane_equation_oracle(self, rng):
        for _ in range(200):
            mean, q, ls = rng.normal(size=3), rng.normal(size=4), rng.normal(size=2)
            o, d = rng.normal(size=3) * 3, rng.normal(size=3)
            d /= np.linalg.norm(d)
            hit = ray_splat_intersect(mean, q, ls, o, d)
            if hit is None:
                continue
            u, v, t = hit
            R = quat_to_rotmat(q)
            p = o + t * d
            s = np.exp(ls)
            assert abs(R[:, 2] @ (p - mean)) < 1e-9
            np.testing.assert_allclose(mean + u * s[0] * R[:, 0] + v * s[1] * R[:, 1], p, atol=1e-9)


class TestForward:
    def test_empty(self):
        out = render(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 2)), np.zeros(0),
                     np.zeros((0, 3)), _cam())
        assert np.all(out.color == 0) and np.all(out.alpha == 0)
        out = render(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 2)), np.zeros(0),
                     np.zeros((0, 3)), _cam(), background=(0.2, 0.4, 0.6))
        np.testing.assert_array_equal(out.color, np.broadcast_to([0.2, 0.4, 0.6], out.color.shape))

    def test_single_opaque_red(self):
        out = render(*_stack([1.0], [20.0], [[1.0, 0.0, 0.0]], scale=5.0), _cam())
        np.testing.assert_allclose(out.color[10, 10], [0.99, 0.0, 0.0], atol=1e-12)
        assert out.alpha[10, 10] == pytest.approx(0.99, abs=1e-12)
        assert out.depth[10, 10] == pytest.approx(1.0, abs=1e-12)
        assert out.distortion[10, 10] == 0.0

    def test_two_surfel_closed_form(self):
        c1, c2, bg = np.array([0.9, 0.2, 0.1]), np.array([0.1, 0.7, 0.3]), np.array([0.05, 0.1, 0.2])
        # index order opposite to depth order: sorting is internal
        scene = _stack([1.5, 1.0], [0.4, -0.3], [c2, c1])
        out = render(*scene, _cam(), background=bg)
        a1, a2 = _sigmoid(-0.3), _sigmoid(0.4)
        w1, w2 = a1, a2 * (1 - a1)
        np.testing.assert_allclose(out.color[10, 10], c1 * w1 + c2 * w2 + bg * (1 - a1) * (1 - a2),
                                   atol=1e-6)
        assert out.depth[10, 10] == pytest.approx((w1 * 1.0 + w2 * 1.5) / (w1 + w2), abs=1e-12)
        assert out.distortion[10, 10] == pytest.approx(w1 * w2 * 0.5, abs=1e-12)
        np.testing.assert_allclose(out.normal[10, 10], [0.0, 0.0, -(w1 + w2)], atol=1e-12)

    def test_gaussian_falloff(self):
        # one pixel right of the center, surfel sigma 0.05 at depth 1, f = 40 -> u = 0.5
        out = render(*_stack([1.0], [0.0], [[1.0, 1.0, 1.0]], scale=0.05), _cam())
        assert out.alpha[10, 11] == pytest.approx(0.5 * np.exp(-0.125), rel=1e-9)

    def test_invariants(self, rng):
        for _ in range(10):
            cam, scene = random_scene(rng)
            out = render(*scene, cam, background=(0.3, 0.3, 0.3))
            assert np.all((out.alpha >= 0) & (out.alpha <= 1))
            assert np.all(np.isfinite(out.color))
            assert np.all(out.distortion >= 0)
            np.testing.assert_allclose(out.alpha + out.transmittance, 1.0, atol=1e-9)
            assert np.all(out.distortion[out.n_contrib <= 1] == 0.0)

    def test_permutation_invariance(self, rng):
        for _ in range(5):
            cam, scene = random_scene(rng, n=15)
            perm = rng.permutation(15)
            a = render(*scene, cam)
            b = render(*[x[perm] for x in scene], cam)
            for f in ("color", "alpha", "depth", "normal", "distortion"):
                np.testing.assert_array_equal(getattr(a, f), getattr(b, f))

    def test_tiles_exact(self, rng):
        for _ in range(3):
            cam, scene = random_scene(rng, n=20, width=45, height=37)
            a = render(*scene, cam)
            b = render(*scene, cam, tile=64)
            for f in ("color", "alpha", "depth", "normal", "distortion", "n_contrib", "touched"):
                np.testing.assert_array_equal(getattr(a, f), getattr(b, f))


class TestBackward:
    def test_color_gradient_is_weight(self):
        scene = _stack([1.0], [0.3], [[0.2, 0.5, 0.9]], scale=5.0)
        g = np.zeros((21, 21, 3))
        g[10, 10, 1] = 1.0
        gb = render_backward(*scene, _cam(), grad_color=g)
        np.testing.assert_allclose(gb.color[0], [0.0, _sigmoid(0.3), 0.0], atol=1e-12)

    def test_occluded_zero(self):
        scene = _stack([1.0, 1.1, 1.2, 1.3, 2.0], [20.0] * 5, np.full((5, 3), 0.5), scale=5.0)
        out = render(*scene, _cam())
        gb = render_backward(*scene, _cam(), grad_color=1.0, grad_alpha=1.0, grad_depth=1.0,
                             grad_normal=1.0, grad_distortion=1.0, forward=out)
        assert out.touched[4] == 0
        for f in ("position", "rotation", "log_scale", "opacity_logit", "color"):
            assert np.all(getattr(gb, f)[4] == 0.0)
        assert np.any(gb.position[0] != 0.0)

    def test_shapes_and_accumulator(self, rng):
        cam, scene = random_scene(rng, n=9)
        gb = render_backward(*scene, cam, grad_color=rng.normal(size=(cam.height, cam.width, 3)))
        assert gb.position.shape == (9, 3) and gb.rotation.shape == (9, 4)
        assert gb.log_scale.shape == (9, 2) and gb.opacity_logit.shape == (9,)
        assert gb.color.shape == (9, 3)
        assert np.all(gb.screen >= 0)
        acc, cnt = np.zeros(9), np.zeros(9)
        gb.accumulate_into(acc, cnt)
        np.testing.assert_array_equal(cnt, gb.visible.astype(float))

    def test_tile_independent(self, rng):
        cam, scene = random_scene(rng, n=12, width=40, height=36)
        gc = rng.normal(size=(36, 40, 3))
        a = render_backward(*scene, cam, grad_color=gc)
        b = render_backward(*scene, cam, grad_color=gc, tile=64)
        for f in ("position", "rotation", "log_scale", "opacity_logit", "color"):
            np.testing.assert_allclose(getattr(a, f), getattr(b, f), rtol=1e-12, atol=1e-14)

    def test_finite_differences(self):
        rng = np.random.default_rng(5)
        for _ in range(3):
            report, _ = check_render(rng)
            assert max(report.values()) < TOLERANCE, report

    def test_autograd_bridge(self, rng):
        cam, scene = random_scene(rng, n=6)
        ts = [torch.tensor(x, requires_grad=True) for x in scene]
        rctx = RenderContext(cam)
        out = rasterize(*ts, rctx)
        w = torch.from_numpy(rng.normal(size=(cam.height, cam.width)))
        (out["alpha"] * w).sum().backward()
        gb = render_backward(*scene, cam, grad_alpha=w.numpy())
        np.testing.assert_allclose(ts[0].grad.numpy(), gb.position, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(ts[3].grad.numpy(), gb.opacity_logit, rtol=1e-12, atol=1e-15)
        assert rctx.grads is not None
