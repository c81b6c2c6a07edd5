import math

import numpy as np
import pytest

from surfelcontact.contact import instantaneous_contact
from surfelcontact.geometry import random_rotation
from surfelcontact.synth import (NonFinite, SynthSpec, brute_force_contact, fd_gradient, generate,
                                 ground_truth)

SMALL = dict(n_frames=4, n_views=2, width=20, height=20, n_seed=200, gt_spacing=0.003)


class TestFdGradient:
    def test_square(self):
        assert fd_gradient(lambda x: float(x[0] ** 2), [3.0])[0] == pytest.approx(6.0, abs=1e-6)

    def test_sin(self):
        assert fd_gradient(lambda x: math.sin(x[0]), [0.0])[0] == pytest.approx(1.0, abs=1e-8)

    def test_vector(self, rng):
        A = rng.normal(size=(4, 4))
        x = rng.normal(size=4)
        g = fd_gradient(lambda v: float(v @ A @ v), x)
        np.testing.assert_allclose(g, (A + A.T) @ x, atol=1e-8)

    def test_non_finite(self):
        with pytest.raises(NonFinite):
            fd_gradient(lambda x: math.log(x[0]) if x[0] > 0 else float("nan"), [0.0])


class TestBruteForce:
    def test_empty_object(self):
        m = brute_force_contact(np.zeros((3, 3)), np.zeros((0, 3)))
        assert not m.in_contact.any() and np.all(np.isinf(m.distance))

    def test_grid(self):
        g = np.array([[i, j, 0.0] for i in range(3) for j in range(3)]) * 0.01
        obj = g + [0.0, 0.0, 0.002]
        obj[4, 2] = 0.02  # lift the middle one away
        m = brute_force_contact(g, obj, tau=0.005)
        expect = np.full(9, 0.002)
        expect[4] = np.hypot(0.01, 0.002)  # nearest is a lateral neighbor
        np.testing.assert_allclose(m.distance, expect, atol=1e-15)
        assert m.in_contact.tolist() == [True] * 4 + [False] + [True] * 4
        assert m.nearest[4] == 1  # four neighbors tie, the lowest index wins

    def test_matches_engine(self, rng):
        for _ in range(20):
            n, k = rng.integers(1, 300, size=2)
            hand = rng.uniform(0, 0.05, size=(n, 3))
            obj = rng.uniform(0, 0.05, size=(k, 3))
            a = brute_force_contact(hand, obj, 0.004)
            b = instantaneous_contact(hand, obj, 0.004)
            np.testing.assert_array_equal(a.in_contact, b.in_contact)
            np.testing.assert_array_equal(a.nearest, b.nearest)
            np.testing.assert_allclose(a.distance, b.distance, rtol=0, atol=1e-12)


class TestGroundTruth:
    def _path(self, tau):
        # a vertex sweeping past a unit sphere, closest (tau / 2 away) at the middle frame
        T = 9
        x = np.linspace(-1, 1, T)
        v = np.stack([x, np.zeros(T), np.full(T, 1.0 + tau / 2)], -1)[:, None, :]
        far = np.tile([[[0.0, 0.0, 3.0]]], (T, 1, 1))
        return np.concatenate([v, far], axis=1)

    def test_pass_within_half_tau(self):
        tau = 0.004
        gt = ground_truth(self._path(tau), lambda p: np.abs(np.linalg.norm(p, axis=-1) - 1.0), tau)
        assert gt.vertex_labels["right"].tolist() == [True, False]
        assert gt.per_frame["right"][:, 0].tolist() == [False] * 4 + [True] + [False] * 4
        assert gt.min_distance["right"][0] == pytest.approx(tau / 2)

    def test_monotone_and_rigid(self, rng):
        v = rng.normal(scale=0.6, size=(5, 50, 3))
        dist = lambda p: np.abs(np.linalg.norm(p, axis=-1) - 0.5)
        prev = None
        for tau in (0.01, 0.05, 0.2):
            lab = ground_truth(v, dist, tau).vertex_labels["right"]
            if prev is not None:
                assert np.all(lab[prev])
            prev = lab
        Q, t = random_rotation(rng), rng.normal(size=3)
        moved = ground_truth(v @ Q.T + t, lambda p: dist((p - t) @ Q), 0.05)
        np.testing.assert_array_equal(moved.vertex_labels["right"],
                                      ground_truth(v, dist, 0.05).vertex_labels["right"])

    def test_json_roundtrip(self, tmp_path):
        tau = 0.004
        gt = ground_truth(self._path(tau), lambda p: np.abs(np.linalg.norm(p, axis=-1) - 1.0), tau)
        gt.save(tmp_path / "gt.json")
        back = type(gt).load(tmp_path / "gt.json")
        np.testing.assert_array_equal(back.vertex_labels["right"], gt.vertex_labels["right"])
        np.testing.assert_array_equal(back.per_frame["right"], gt.per_frame["right"])
        assert back.tau == tau


class TestGenerate:
    def test_contact_scene(self, tiny_synth):
        bundle, gt = tiny_synth
        tmpl = bundle.templates["right"]
        assert tmpl.vertices.shape[0] == bundle.n_frames == 4
        assert bundle.images.shape == (3, 4, 24, 24, 3)
        assert gt.vertex_labels["right"].any()
        assert bundle.masks.any() and not bundle.masks.all()
        assert bundle.metadata["tau_m"] == 0.004

    def test_no_contact_control(self):
        _, gt = generate(SynthSpec(final_gap=0.01, **SMALL))
        assert not gt.vertex_labels["right"].any()
        assert gt.min_distance["right"].min() > 0.004

    def test_deterministic(self, tmp_path):
        a = generate(SynthSpec(noise=0.01, **SMALL))[0].save(tmp_path / "a")
        b = generate(SynthSpec(noise=0.01, **SMALL))[0].save(tmp_path / "b")
        files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
        assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
        for f in files:
            assert (a / f).read_bytes() == (b / f).read_bytes(), f

    def test_seed_changes_noise(self):
        a, _ = generate(SynthSpec(noise=0.01, seed=0, **SMALL))
        b, _ = generate(SynthSpec(noise=0.01, seed=1, **SMALL))
        assert not np.array_equal(a.images, b.images)

    def test_bulge_only_in_images(self):
        a, ga = generate(SynthSpec(**SMALL))
        b, gb = generate(SynthSpec(bulge=0.004, **SMALL))
        np.testing.assert_array_equal(a.templates["right"].vertices, b.templates["right"].vertices)
        np.testing.assert_array_equal(ga.vertex_labels["right"], gb.vertex_labels["right"])
        assert not np.array_equal(a.images, b.images)

    def test_paddle_box(self):
        bundle, gt = generate(SynthSpec(kind="paddle-box", **SMALL))
        assert gt.vertex_labels["right"].any()
        faces = bundle.templates["right"].faces
        assert faces.max() < bundle.templates["right"].vertices.shape[1]

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            SynthSpec(kind="cube-cube")
        with pytest.raises(ValueError):
            SynthSpec(n_views=1)
        with pytest.raises(ValueError):
            SynthSpec(n_frames=0)
