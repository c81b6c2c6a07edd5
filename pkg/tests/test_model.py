import math

import numpy as np
import pytest
import torch

from surfelcontact.geometry import (TriangleFrame, quat_to_rotmat, random_rotation, rotmat_to_quat,
                                    triangle_frame)
from surfelcontact.model import (FACE_ALIGNED_QUAT, FrameOutOfRange, HandModel, ObjectModel,
                                 RefinementNet, SurfelSet, TemplateSequence, compose_scene,
                                 init_hand_surfels, object_to_world, refine, rig_to_world,
                                 t_normalized)


def _surfels(rng, n, sh_k=1):
    return SurfelSet(torch.from_numpy(rng.normal(size=(n, 3))),
                     torch.from_numpy(rng.normal(size=(n, 4))),
                     torch.from_numpy(rng.normal(size=(n, 2)) - 1.0),
                     torch.from_numpy(rng.normal(size=n)),
                     torch.from_numpy(rng.normal(size=(n, sh_k, 3))))


def _template(rng, n_frames=3, n_faces=6):
    v = rng.normal(scale=0.05, size=(n_frames, n_faces + 2, 3))
    faces = np.array([[0, i + 1, i + 2] for i in range(n_faces)])
    return TemplateSequence(faces, v)


def _same_rotation(qa, qb, atol=1e-9):
    np.testing.assert_allclose(quat_to_rotmat(np.asarray(qa)), quat_to_rotmat(np.asarray(qb)),
                               atol=atol)


class TestInitHandSurfels:
    def test_counts_and_bindings(self, rng):
        tmpl = _template(rng, n_faces=7)
        s, tri, skipped = init_hand_surfels(tmpl, k=5, v=0.5, rng=rng)
        assert len(s) == 35 and skipped == 0
        np.testing.assert_array_equal(tri, np.repeat(np.arange(7), 5))

    def test_initial_attributes(self, rng):
        s, _, _ = init_hand_surfels(_template(rng), k=3, v=0.5, gray=0.3, rng=rng)
        np.testing.assert_allclose(s.log_scale.numpy(), math.log(0.5))
        np.testing.assert_allclose(s.opacity.numpy(), 0.1, atol=1e-12)
        np.testing.assert_allclose(s.rgb(np.zeros(3)).numpy(), 0.3, atol=1e-12)
        np.testing.assert_allclose(s.rot.numpy(), np.tile(FACE_ALIGNED_QUAT, (len(s), 1)))

    def test_face_aligned_normal(self, rng):
        # local surfel normal (z) maps onto the triangle normal (frame column 2)
        R = quat_to_rotmat(np.array(FACE_ALIGNED_QUAT))
        np.testing.assert_allclose(R[:, 2], [0, 1, 0], atol=1e-12)

    def test_zero_variance_limit(self, rng):
        s, _, _ = init_hand_surfels(_template(rng), k=1, v=1e-20, rng=rng)
        assert np.abs(s.xyz.numpy()).max() < 1e-8

    def test_position_variance(self, rng):
        s, _, _ = init_hand_surfels(_template(rng, n_faces=200), k=5, v=0.5, rng=rng)
        assert s.xyz.numpy().var() == pytest.approx(0.5, rel=0.1)

    def test_deterministic(self):
        tmpl = _template(np.random.default_rng(0))
        a, _, _ = init_hand_surfels(tmpl, rng=np.random.default_rng(7))
        b, _, _ = init_hand_surfels(tmpl, rng=np.random.default_rng(7))
        for f in SurfelSet.FIELDS:
            assert torch.equal(getattr(a, f), getattr(b, f))

    def test_degenerate_faces_skipped(self, rng):
        v = rng.normal(size=(1, 5, 3))
        v[0, 4] = v[0, 3]  # face (2, 3, 4) collapses
        tmpl = TemplateSequence(np.array([[0, 1, 2], [2, 3, 4], [1, 2, 3]]), v)
        s, tri, skipped = init_hand_surfels(tmpl, k=2, rng=rng)
        assert skipped == 1
        assert set(tri.tolist()) == {0, 2}

    def test_invalid(self, rng):
        with pytest.raises(ValueError):
            init_hand_surfels(_template(rng), k=0)
        with pytest.raises(ValueError):
            init_hand_surfels(_template(rng), v=0.0)


class TestRigToWorld:
    def test_identity_frame(self, rng):
        local = _surfels(rng, 4)
        f = TriangleFrame(np.eye(3)[None], np.zeros((1, 3)), np.ones(1))
        w = rig_to_world(local, f)
        np.testing.assert_allclose(w.xyz.numpy(), local.xyz.numpy(), atol=1e-15)
        np.testing.assert_allclose(w.log_scale.numpy(), local.log_scale.numpy(), atol=1e-15)
        _same_rotation(w.rot.numpy(), local.rot.numpy())
        assert torch.equal(w.opacity_logit, local.opacity_logit)
        assert torch.equal(w.sh, local.sh)

    def test_pure_scale(self):
        local = SurfelSet(torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64),
                          torch.tensor([[1.0, 0.0, 0.0, 0.0]], dtype=torch.float64),
                          torch.log(torch.tensor([[0.3, 0.7]], dtype=torch.float64)),
                          torch.zeros(1, dtype=torch.float64), torch.zeros((1, 1, 3), dtype=torch.float64))
        w = rig_to_world(local, TriangleFrame(np.eye(3)[None], np.zeros((1, 3)), np.array([2.0])))
        np.testing.assert_allclose(w.xyz.numpy(), [[2.0, 0.0, 0.0]], atol=1e-15)
        np.testing.assert_allclose(np.exp(w.log_scale.numpy()), [[0.6, 1.4]], atol=1e-12)

    def test_homogeneous_oracle(self, rng):
        n = 30
        local = _surfels(rng, n)
        R = random_rotation(rng, n)
        T = rng.normal(size=(n, 3))
        s = rng.uniform(0.1, 2.0, size=n)
        w = rig_to_world(local, TriangleFrame(R, T, s))
        M = np.zeros((n, 4, 4))
        M[:, :3, :3] = s[:, None, None] * R
        M[:, :3, 3] = T
        M[:, 3, 3] = 1.0
        xh = np.concatenate([local.xyz.numpy(), np.ones((n, 1))], 1)
        np.testing.assert_allclose(w.xyz.numpy(), np.einsum("nij,nj->ni", M, xh)[:, :3], atol=1e-9)
        np.testing.assert_allclose(quat_to_rotmat(w.rot.numpy()),
                                   R @ quat_to_rotmat(local.rot.numpy()), atol=1e-9)
        np.testing.assert_allclose(np.exp(w.log_scale.numpy()),
                                   s[:, None] * np.exp(local.log_scale.numpy()), atol=1e-12)

    def test_rigid_equivariance(self, rng):
        tmpl = _template(rng, n_frames=1, n_faces=10)
        hand = HandModel.initialize("right", tmpl, k=3, v=0.5, rng=rng)
        w0 = hand.world(0)
        for _ in range(20):
            Q, t = random_rotation(rng), rng.normal(size=3)
            moved = TemplateSequence(tmpl.faces, tmpl.vertices @ Q.T + t)
            w1 = HandModel("right", moved, hand.local, hand.triangle_ids).world(0)
            np.testing.assert_allclose(w1.xyz.numpy(), w0.xyz.numpy() @ Q.T + t, atol=1e-9)
            np.testing.assert_allclose(quat_to_rotmat(w1.rot.numpy()),
                                       Q @ quat_to_rotmat(w0.rot.numpy()), atol=1e-9)
            np.testing.assert_allclose(w1.log_scale.numpy(), w0.log_scale.numpy(), atol=1e-9)

    def test_scale_monotonicity(self, rng):
        tmpl = _template(rng, n_frames=1)
        hand = HandModel.initialize("left", tmpl, k=2, rng=rng)
        fr = tmpl.frames(0)
        alpha = 1.7
        big = HandModel("left", TemplateSequence(tmpl.faces, alpha * tmpl.vertices),
                        hand.local, hand.triangle_ids)
        w0, w1 = hand.world(0), big.world(0)
        T = fr.T[hand.triangle_ids]
        np.testing.assert_allclose(w1.xyz.numpy() - alpha * T, alpha * (w0.xyz.numpy() - T), atol=1e-12)
        np.testing.assert_allclose(w1.log_scale.numpy() - w0.log_scale.numpy(), math.log(alpha), atol=1e-12)


class TestRefinement:
    def test_zero_init(self, rng):
        net = RefinementNet(depth=3, width=16)
        w = _surfels(rng, 6)
        out, (dx, dr, ds) = refine(w, 0.3, net)
        assert all(float(d.detach().abs().max()) == 0 for d in (dx, dr, ds))
        np.testing.assert_allclose(out.xyz.detach().numpy(), w.xyz.numpy())
        _same_rotation(out.rot.detach().numpy(), w.rot.numpy())

    def test_output_dims(self, rng):
        net = RefinementNet(depth=2, width=8, L_x=3, L_r=2, L_s=2, L_j=1)
        dx, dr, ds = net(*(torch.from_numpy(a) for a in (rng.normal(size=(5, 3)), rng.normal(size=(5, 4)),
                                                            rng.normal(size=(5, 2)))), 0.5)
        assert dx.shape == (5, 3) and dr.shape == (5, 4) and ds.shape == (5, 2)

    def test_time_dependence(self, rng):
        net = RefinementNet(depth=3, width=16, seed=3)
        with torch.no_grad():
            for p in net.parameters():
                p.normal_(0.0, 0.3, generator=torch.Generator().manual_seed(1))
        w = _surfels(rng, 4)
        _, a = refine(w, 0.0, net)
        _, b = refine(w, 1.0, net)
        assert not torch.allclose(a[0], b[0])

    def test_gradient_isolation(self, rng):
        """Gradients reach the surfel only through the additive offsets."""
        net = RefinementNet(depth=3, width=16, seed=3)
        with torch.no_grad():
            for p in net.parameters():
                p.normal_(0.0, 0.3, generator=torch.Generator().manual_seed(2))
        w = _surfels(rng, 5)
        for f in SurfelSet.FIELDS:
            getattr(w, f).requires_grad_(True)
        out, _ = refine(w, 0.4, net)
        out.xyz.sum().backward()
        np.testing.assert_array_equal(w.xyz.grad.numpy(), np.ones((5, 3)))
        assert w.rot.grad is None or float(w.rot.grad.abs().max()) == 0.0
        assert w.log_scale.grad is None or float(w.log_scale.grad.abs().max()) == 0.0
        enc = net.encode(w.xyz, w.rot, w.log_scale, 0.4)
        assert not enc.requires_grad

    def test_net_weights_fd(self, rng):
        from surfelcontact.gradcheck import check_refinement

        report, _ = check_refinement(rng)
        assert max(report.values()) < 1e-4

    def test_t_normalized(self):
        assert t_normalized(0, 1) == 0.0
        assert t_normalized(3, 4) == 1.0
        assert t_normalized(1, 5) == 0.25


class TestObjects:
    def _obj(self, rng, n=5, frames=3):
        return ObjectModel(_surfels(rng, n), torch.tensor([[1.0, 0, 0, 0]] * frames, dtype=torch.float64),
                           torch.zeros((frames, 3), dtype=torch.float64))

    def test_identity_pose(self, rng):
        obj = self._obj(rng)
        w = object_to_world(obj, 1)
        np.testing.assert_allclose(w.xyz.numpy(), obj.canonical.xyz.numpy(), atol=1e-15)
        _same_rotation(w.rot.numpy(), obj.canonical.rot.numpy())

    def test_translation(self, rng):
        obj = self._obj(rng)
        obj.pose_t[2] = torch.tensor([0.0, 0.0, 0.1], dtype=torch.float64)
        w = object_to_world(obj, 2)
        np.testing.assert_allclose(w.xyz.numpy() - obj.canonical.xyz.numpy(),
                                   np.broadcast_to([0.0, 0.0, 0.1], (5, 3)), atol=1e-15)

    def test_rotation_z90(self, rng):
        obj = self._obj(rng, n=1)
        obj.canonical.xyz[0] = torch.tensor([1.0, 0.0, 0.0], dtype=torch.float64)
        obj.pose_q[0] = torch.tensor([math.cos(math.pi / 4), 0.0, 0.0, math.sin(math.pi / 4)],
                                     dtype=torch.float64)
        w = object_to_world(obj, 0)
        np.testing.assert_allclose(w.xyz.numpy(), [[0.0, 1.0, 0.0]], atol=1e-9)
        R = quat_to_rotmat(obj.pose_q[0].numpy())
        np.testing.assert_allclose(quat_to_rotmat(w.rot.numpy()),
                                   R @ quat_to_rotmat(obj.canonical.rot.numpy()), atol=1e-9)

    def test_frame_out_of_range(self, rng):
        with pytest.raises(FrameOutOfRange):
            object_to_world(self._obj(rng), 3)

    def test_from_points(self, rng):
        d = rng.normal(size=(500, 3))
        p = 0.03 * d / np.linalg.norm(d, axis=1, keepdims=True)
        obj = ObjectModel.from_points(p, 4)
        assert obj.n_frames == 4 and len(obj.canonical) == 500
        n = quat_to_rotmat(obj.canonical.rot.numpy())[:, :, 2]
        radial = np.abs(np.sum(n * p / 0.03, axis=1))
        assert np.median(radial) > 0.95  # PCA normals follow the sphere


class TestCompose:
    def test_empty_objects(self, rng):
        hand = HandModel.initialize("right", _template(rng), k=2, rng=rng)
        sc = compose_scene({"right": hand}, [], 0)
        assert len(sc.surfels) == len(hand.local)
        assert np.all(sc.tags == 1)

    def test_cardinality_and_order(self, rng):
        tmpl = _template(rng, n_faces=10)
        hand = HandModel.initialize("right", tmpl, k=10, rng=rng)
        obj = ObjectModel(_surfels(rng, 50), torch.tensor([[1.0, 0, 0, 0]] * 3, dtype=torch.float64),
                          torch.zeros((3, 3), dtype=torch.float64))
        sc = compose_scene({"right": hand}, [obj], 2)
        assert len(sc.surfels) == 150
        assert np.sum(sc.tags == 1) == 100 and np.sum(sc.tags == 2) == 50
        np.testing.assert_allclose(sc.surfels.xyz[:100].detach().numpy(), hand.world(2).xyz.numpy())
        np.testing.assert_allclose(sc.surfels.xyz[100:].detach().numpy(),
                                   object_to_world(obj, 2).xyz.numpy())

    def test_two_hands_piecewise(self, rng):
        left = HandModel.initialize("left", _template(rng), k=2, rng=rng)
        right = HandModel.initialize("right", _template(rng), k=3, rng=rng)
        net = RefinementNet(depth=2, width=8)
        sc = compose_scene({"right": right, "left": left}, [], 1, net)
        assert sc.hand_offsets["left"] == slice(0, len(left.local))
        np.testing.assert_allclose(sc.surfels.xyz[sc.hand_offsets["right"]].detach().numpy(),
                                   right.world(1).xyz.numpy())
        assert set(np.unique(sc.tags)) == {0, 1}

    def test_bad_hand_name(self, rng):
        with pytest.raises(ValueError):
            HandModel.initialize("middle", _template(rng), rng=rng)
