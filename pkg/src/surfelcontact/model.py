"""Scene representation: rigged hand surfels, refinement MLP, posed objects.

Every differentiable transform is written in torch (float64 by default) so
gradients reach local surfel parameters, network weights and object poses.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .geometry import (DEGENERATE_AREA, TriangleFrame, posenc, quat_multiply, quat_to_rotmat_torch,
                       rotmat_to_quat, triangle_areas, triangle_frame)

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
         -0.4570457994644658, 1.445305721320277, -0.5900435899266435)

HAND_TAGS = {"left": 0, "right": 1}
OBJECT_TAG0 = 2

# surfel normal (local z) onto the triangle normal (local y); tangents stay in the face
FACE_ALIGNED_QUAT = (math.sqrt(0.5), -math.sqrt(0.5), 0.0, 0.0)


class FrameOutOfRange(IndexError):
    pass


def logit(p):
    return math.log(p / (1.0 - p))


def rgb_to_sh0(rgb):
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def eval_sh(sh: torch.Tensor, dirs: torch.Tensor) -> torch.Tensor:
    """RGB from SH coefficients ``(N, K, 3)`` and unit view directions ``(N, 3)``."""
    K = sh.shape[1]
    out = SH_C0 * sh[:, 0]
    if K > 1:
        x, y, z = dirs[:, :1], dirs[:, 1:2], dirs[:, 2:3]
        out = out - SH_C1 * y * sh[:, 1] + SH_C1 * z * sh[:, 2] - SH_C1 * x * sh[:, 3]
        if K > 4:
            xx, yy, zz = x * x, y * y, z * z
            xy, yz, xz = x * y, y * z, x * z
            out = (out + SH_C2[0] * xy * sh[:, 4] + SH_C2[1] * yz * sh[:, 5]
                   + SH_C2[2] * (2.0 * zz - xx - yy) * sh[:, 6]
                   + SH_C2[3] * xz * sh[:, 7] + SH_C2[4] * (xx - yy) * sh[:, 8])
            if K > 9:
                out = (out + SH_C3[0] * y * (3 * xx - yy) * sh[:, 9]
                       + SH_C3[1] * xy * z * sh[:, 10]
                       + SH_C3[2] * y * (4 * zz - xx - yy) * sh[:, 11]
                       + SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy) * sh[:, 12]
                       + SH_C3[4] * x * (4 * zz - xx - yy) * sh[:, 13]
                       + SH_C3[5] * z * (xx - yy) * sh[:, 14]
                       + SH_C3[6] * x * (xx - 3 * yy) * sh[:, 15])
    return out + 0.5


def _tensor(x, dtype=torch.float64):
    # always a copy: parameters must never alias caller arrays
    return torch.tensor(np.asarray(x), dtype=dtype)


@dataclass
class SurfelSet:
    """A batch of surfels in the optimizer parameterization."""

    xyz: torch.Tensor  # (N, 3)
    rot: torch.Tensor  # (N, 4) unnormalized quaternion
    log_scale: torch.Tensor  # (N, 2)
    opacity_logit: torch.Tensor  # (N,)
    sh: torch.Tensor  # (N, K, 3)

    FIELDS = ("xyz", "rot", "log_scale", "opacity_logit", "sh")

    def __len__(self):
        return self.xyz.shape[0]

    @property
    def opacity(self):
        return torch.sigmoid(self.opacity_logit)

    def tensors(self):
        return {f: getattr(self, f) for f in self.FIELDS}

    def index(self, idx) -> "SurfelSet":
        return SurfelSet(*(getattr(self, f)[idx] for f in self.FIELDS))

    def detach(self) -> "SurfelSet":
        return SurfelSet(*(getattr(self, f).detach() for f in self.FIELDS))

    def rgb(self, camera_center) -> torch.Tensor:
        if self.sh.shape[1] == 1:
            return SH_C0 * self.sh[:, 0] + 0.5
        d = self.xyz - _tensor(camera_center, self.xyz.dtype)
        d = d / d.norm(dim=-1, keepdim=True)
        return eval_sh(self.sh, d)

    @staticmethod
    def cat(sets) -> "SurfelSet":
        sets = list(sets)
        return SurfelSet(*(torch.cat([getattr(s, f) for s in sets], 0) for f in SurfelSet.FIELDS))


# --------------------------------------------------------------------------
# template rigging


@dataclass
class TemplateSequence:
    """Fixed-topology mesh with one vertex buffer per frame."""

    faces: np.ndarray  # (F, 3) int
    vertices: np.ndarray  # (T, V, 3)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        if self.vertices.ndim != 3 or self.vertices.shape[-1] != 3:
            raise ValueError("vertices must have shape (T, V, 3)")
        if np.isnan(self.vertices).any():
            raise ValueError("template contains NaN coordinates")

    @property
    def n_frames(self):
        return self.vertices.shape[0]

    def valid_faces(self, frame: int = 0) -> np.ndarray:
        v = self.vertices[frame]
        f = self.faces
        return np.nonzero(triangle_areas(v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]) >= DEGENERATE_AREA)[0]

    def frames(self, t: int, face_ids=None) -> TriangleFrame:
        if not 0 <= t < self.n_frames:
            raise FrameOutOfRange(f"frame {t} outside [0, {self.n_frames})")
        f = self.faces if face_ids is None else self.faces[face_ids]
        v = self.vertices[t]
        return triangle_frame(v[f[:, 0]], v[f[:, 1]], v[f[:, 2]])


def init_hand_surfels(template: TemplateSequence, k: int = 5, v: float = 0.5,
                      gray: float = 0.5, sh_degree: int = 0,
                      rng: np.random.Generator | None = None, frame: int = 0):
    """Sample ``k`` surfels per non-degenerate triangle in triangle-local units.

    Returns ``(SurfelSet, triangle_ids, n_skipped)``.
    """
    if k < 1 or v <= 0:
        raise ValueError("need k >= 1 and v > 0")
    rng = np.random.default_rng() if rng is None else rng
    faces = template.valid_faces(frame)
    skipped = len(template.faces) - len(faces)
    tri = np.repeat(faces, k)
    n = len(tri)
    xyz = rng.normal(scale=math.sqrt(v), size=(n, 3))
    rot = np.tile(FACE_ALIGNED_QUAT, (n, 1))
    ls = np.full((n, 2), math.log(0.5))
    op = np.full(n, logit(0.1))
    K = (sh_degree + 1) ** 2
    sh = np.zeros((n, K, 3))
    sh[:, 0] = rgb_to_sh0(gray)
    return SurfelSet(_tensor(xyz), _tensor(rot), _tensor(ls), _tensor(op), _tensor(sh)), tri, skipped


@dataclass
class TorchFrames:
    R: torch.Tensor  # (F, 3, 3)
    T: torch.Tensor  # (F, 3)
    s: torch.Tensor  # (F,)
    q: torch.Tensor  # (F, 4)

    @classmethod
    def from_frame(cls, fr: TriangleFrame, dtype=torch.float64):
        R = np.asarray(fr.R).reshape(-1, 3, 3)
        return cls(_tensor(R, dtype), _tensor(np.asarray(fr.T).reshape(-1, 3), dtype),
                   _tensor(np.asarray(fr.s).reshape(-1), dtype), _tensor(rotmat_to_quat(R), dtype))

    def index(self, idx):
        return TorchFrames(self.R[idx], self.T[idx], self.s[idx], self.q[idx])


def rig_to_world(local: SurfelSet, frame) -> SurfelSet:
    """Map triangle-local surfels to world space: ``(R r, s R x + T, s * scale)``.

    ``frame`` is a TriangleFrame (one triangle or one per surfel) or TorchFrames.
    """
    if not isinstance(frame, TorchFrames):
        frame = TorchFrames.from_frame(frame, local.xyz.dtype)
    n = len(local)
    R, T, s, q = frame.R, frame.T, frame.s, frame.q
    if R.shape[0] == 1 and n != 1:
        R, T, s, q = (a.expand((n,) + a.shape[1:]) for a in (R, T, s, q))
    xyz = s[:, None] * torch.einsum("nij,nj->ni", R, local.xyz) + T
    rot = quat_multiply(q, local.rot / local.rot.norm(dim=-1, keepdim=True))
    log_scale = local.log_scale + torch.log(s)[:, None]
    return SurfelSet(xyz, rot, log_scale, local.opacity_logit, local.sh)


# --------------------------------------------------------------------------
# refinement network


class RefinementNet(nn.Module):
    """MLP mapping encoded (position, rotation, log-scale, time) to attribute offsets.

    ``depth`` counts linear layers. The output layer starts at zero, so a fresh
    network leaves every surfel untouched.
    """

    def __init__(self, depth: int = 4, width: int = 64, L_x: int = 8, L_r: int = 4,
                 L_s: int = 4, L_j: int = 4, dtype=torch.float64, seed: int = 0):
        super().__init__()
        self.L = (L_x, L_r, L_s, L_j)
        in_dim = 2 * (3 * L_x + 4 * L_r + 2 * L_s + L_j)
        gen = torch.Generator().manual_seed(seed)
        layers = []
        dims = [in_dim] + [width] * (depth - 1) + [9]
        for i in range(depth):
            lin = nn.Linear(dims[i], dims[i + 1], dtype=dtype)
            bound = 1.0 / math.sqrt(dims[i])
            with torch.no_grad():
                lin.weight.uniform_(-bound, bound, generator=gen)
                lin.bias.uniform_(-bound, bound, generator=gen)
            layers.append(lin)
            if i < depth - 1:
                layers.append(nn.ReLU())
        with torch.no_grad():
            layers[-1].weight.zero_()
            layers[-1].bias.zero_()
        self.mlp = nn.Sequential(*layers)

    def encode(self, xyz, rot, log_scale, t_norm):
        L_x, L_r, L_s, L_j = self.L
        # stop-gradient: the encoding never routes gradients back into the surfel
        xyz, rot, log_scale = xyz.detach(), rot.detach(), log_scale.detach()
        rot = rot / rot.norm(dim=-1, keepdim=True)
        t = torch.full((xyz.shape[0], 1), float(t_norm), dtype=xyz.dtype)
        return torch.cat([posenc(xyz, L_x), posenc(rot, L_r), posenc(log_scale, L_s),
                          posenc(t, L_j)], dim=-1)

    def forward(self, xyz, rot, log_scale, t_norm):
        out = self.mlp(self.encode(xyz, rot, log_scale, t_norm))
        return out[:, :3], out[:, 3:7], out[:, 7:9]


def refine(world: SurfelSet, t_norm: float, net: RefinementNet):
    """Return ``(refined SurfelSet, (dx, dr, ds))`` for one time step."""
    dx, dr, ds = net(world.xyz, world.rot, world.log_scale, t_norm)
    rot = world.rot / world.rot.norm(dim=-1, keepdim=True) + dr
    refined = SurfelSet(world.xyz + dx, rot, world.log_scale + ds, world.opacity_logit, world.sh)
    return refined, (dx, dr, ds)


def t_normalized(j: int, n_frames: int) -> float:
    return 0.0 if n_frames <= 1 else j / (n_frames - 1)


# --------------------------------------------------------------------------
# hands and objects


class HandModel:
    """Surfels bound to the triangles of one template sequence."""

    def __init__(self, name: str, template: TemplateSequence, surfels: SurfelSet,
                 triangle_ids: np.ndarray):
        if name not in HAND_TAGS:
            raise ValueError(f"hand name must be one of {sorted(HAND_TAGS)}")
        self.name = name
        self.template = template
        self.local = surfels
        self.triangle_ids = np.asarray(triangle_ids, dtype=np.int64)
        self._frames: dict[int, TorchFrames] = {}

    @classmethod
    def initialize(cls, name, template, k=5, v=0.5, gray=0.5, sh_degree=0, rng=None):
        surfels, tri, _ = init_hand_surfels(template, k, v, gray, sh_degree, rng)
        return cls(name, template, surfels, tri)

    def frames(self, t: int) -> TorchFrames:
        if t not in self._frames:
            self._frames[t] = TorchFrames.from_frame(self.template.frames(t), self.local.xyz.dtype)
        return self._frames[t]

    def world(self, t: int) -> SurfelSet:
        return rig_to_world(self.local, self.frames(t).index(torch.as_tensor(self.triangle_ids)))

    def triangle_scale(self) -> np.ndarray:
        """Per-surfel triangle scale averaged over the sequence."""
        s = np.mean([self.template.frames(t).s for t in range(self.template.n_frames)], axis=0)
        return s[self.triangle_ids]


class ObjectModel:
    """Rigid object: canonical surfels plus one (q, t) pose per frame."""

    def __init__(self, surfels: SurfelSet, pose_q: torch.Tensor, pose_t: torch.Tensor):
        if pose_q.shape[0] != pose_t.shape[0]:
            raise ValueError("pose track lengths differ")
        self.canonical = surfels
        self.pose_q = pose_q
        self.pose_t = pose_t

    @property
    def n_frames(self):
        return self.pose_q.shape[0]

    @classmethod
    def from_points(cls, points, n_frames: int, colors=None, sh_degree: int = 0,
                    opacity: float = 0.1, knn: int = 8):
        """Surfels at seed points, oriented by local PCA, sized by neighbor spacing."""
        from scipy.spatial import cKDTree

        p = np.asarray(points, dtype=np.float64)
        n = len(p)
        kk = min(knn + 1, n)
        dist, nbr = cKDTree(p).query(p, k=kk)
        dist, nbr = np.atleast_2d(dist), np.atleast_2d(nbr)
        rot = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        if kk >= 4:
            nb = p[nbr] - p[nbr].mean(axis=1, keepdims=True)
            _, vecs = np.linalg.eigh(np.einsum("nki,nkj->nij", nb, nb))
            normal = vecs[:, :, 0]
            centroid = p.mean(axis=0)
            flip = np.einsum("ni,ni->n", normal, p - centroid) < 0
            normal[flip] *= -1
            tu = vecs[:, :, 2]
            tv = np.cross(normal, tu)
            rot = rotmat_to_quat(np.stack([tu, tv, normal], axis=-1))
        spacing = np.sqrt(np.mean(dist[:, 1:min(4, kk)] ** 2, axis=1)) if kk > 1 else np.full(n, 1e-3)
        spacing = np.clip(spacing, 1e-6, None)
        ls = np.repeat(np.log(spacing)[:, None], 2, axis=1)
        K = (sh_degree + 1) ** 2
        sh = np.zeros((n, K, 3))
        sh[:, 0] = rgb_to_sh0(0.5 if colors is None else colors)
        surfels = SurfelSet(_tensor(p), _tensor(rot), _tensor(ls),
                            _tensor(np.full(n, logit(opacity))), _tensor(sh))
        q = torch.zeros((n_frames, 4), dtype=torch.float64)
        q[:, 0] = 1.0
        return cls(surfels, q, torch.zeros((n_frames, 3), dtype=torch.float64))


def object_to_world(obj: ObjectModel, t: int) -> SurfelSet:
    if not 0 <= t < obj.n_frames:
        raise FrameOutOfRange(f"frame {t} outside [0, {obj.n_frames})")
    q = obj.pose_q[t]
    q = q / q.norm()
    R = quat_to_rotmat_torch(q)
    c = obj.canonical
    xyz = c.xyz @ R.T + obj.pose_t[t]
    rot = quat_multiply(q.expand(len(c), 4), c.rot)
    return SurfelSet(xyz, rot, c.log_scale, c.opacity_logit, c.sh)


@dataclass
class ComposedScene:
    surfels: SurfelSet
    tags: np.ndarray  # (N,) int: 0 left hand, 1 right hand, 2+k object k
    hand_offsets: dict  # hand name -> slice into the composed array
    object_slices: list

    def hand_mask(self):
        return self.tags < OBJECT_TAG0


def compose_scene(hands: dict, objects: list, t: int, net: RefinementNet | None = None,
                  n_frames: int | None = None) -> ComposedScene:
    """World surfels of every hand (rigged, optionally refined) and object at frame ``t``."""
    parts, tags, hand_slices, obj_slices = [], [], {}, []
    start = 0
    for name in sorted(hands, key=lambda h: HAND_TAGS[h]):
        hand = hands[name]
        w = hand.world(t)
        if net is not None:
            T = hand.template.n_frames if n_frames is None else n_frames
            w, _ = refine(w, t_normalized(t, T), net)
        parts.append(w)
        tags.append(np.full(len(w), HAND_TAGS[name]))
        hand_slices[name] = slice(start, start + len(w))
        start += len(w)
    for i, obj in enumerate(objects):
        w = object_to_world(obj, t)
        parts.append(w)
        tags.append(np.full(len(w), OBJECT_TAG0 + i))
        obj_slices.append(slice(start, start + len(w)))
        start += len(w)
    if not parts:
        empty = SurfelSet(torch.zeros((0, 3), dtype=torch.float64), torch.zeros((0, 4), dtype=torch.float64),
                          torch.zeros((0, 2), dtype=torch.float64), torch.zeros(0, dtype=torch.float64),
                          torch.zeros((0, 1, 3), dtype=torch.float64))
        return ComposedScene(empty, np.zeros(0, dtype=np.int64), {}, [])
    return ComposedScene(SurfelSet.cat(parts), np.concatenate(tags).astype(np.int64),
                         hand_slices, obj_slices)
