"""Synthetic manipulation scenes with analytic contact ground truth, plus test oracles.

Two scene kinds are built from box-shaped rigid links on a hinge:

``gripper-sphere``
    Two fingers pivot about parallel hinges and close onto a sphere.
``paddle-box``
    A paddle hinged to a fixed arm swings down onto the top of a box.

The template handed to the fitter is the undeformed link mesh. An optional
time-varying bulge is added only to the geometry used for rendering, so it is
something the refinement network has to explain.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .bundle import SceneBundle
from .contact import DEFAULT_TAU, ContactMap
from .geometry import Camera, rotmat_to_quat
from .model import TemplateSequence
from .raster import render

SCENE_KINDS = ("gripper-sphere", "paddle-box")


class NonFinite(ValueError):
    pass


@dataclass
class SynthSpec:
    kind: str = "gripper-sphere"
    n_frames: int = 20
    n_views: int = 8
    width: int = 64
    height: int = 64
    noise: float = 0.0  # std of additive Gaussian image noise, [0, 1] units
    seed: int = 0
    tau: float = DEFAULT_TAU
    final_gap: float = 0.001  # link-to-object clearance at full closure, meters
    bulge: float = 0.0  # peak outward bulge of the rendered links, meters
    cell: float = 0.01  # template edge length, meters
    contact_cell: float = 0.004  # finer edge length around the expected contact patch
    gt_spacing: float = 0.0015  # spacing of the dense surfels used for rendering
    n_seed: int = 3000  # object seed points
    camera_distance: float = 0.25
    fov_deg: float = 45.0

    def __post_init__(self):
        if self.kind not in SCENE_KINDS:
            raise ValueError(f"scene kind must be one of {SCENE_KINDS}")
        if self.n_frames < 1 or self.n_views < 2:
            raise ValueError("need n_frames >= 1 and n_views >= 2")
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    def to_dict(self):
        return asdict(self)


@dataclass
class GroundTruth:
    """Per-vertex contact labels of the template, from closed-form distances."""

    tau: float
    vertex_labels: dict  # hand name -> (V,) bool, contact in any frame
    per_frame: dict  # hand name -> (T, V) bool
    min_distance: dict  # hand name -> (V,) meters

    def to_json(self) -> dict:
        return {
            "schema_version": 1,
            "tau_m": self.tau,
            "units": "meters",
            "hands": {
                h: {"vertex_labels": self.vertex_labels[h].astype(int).tolist(),
                    "per_frame_vertices": [np.nonzero(r)[0].tolist() for r in self.per_frame[h]],
                    "min_distance_m": [float(d) for d in self.min_distance[h]]}
                for h in sorted(self.vertex_labels)
            },
        }

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "GroundTruth":
        with open(path) as f:
            d = json.load(f)
        labels, frames, dist = {}, {}, {}
        for h, e in d["hands"].items():
            v = np.asarray(e["vertex_labels"], dtype=bool)
            labels[h] = v
            pf = np.zeros((len(e["per_frame_vertices"]), len(v)), dtype=bool)
            for t, idx in enumerate(e["per_frame_vertices"]):
                pf[t, idx] = True
            frames[h] = pf
            dist[h] = np.asarray(e["min_distance_m"], dtype=np.float64)
        return cls(d["tau_m"], labels, frames, dist)


# --------------------------------------------------------------------------
# meshes


def _ticks(lo, hi, cell, zones=()):
    """Grid ticks on [lo, hi] at spacing <= ``cell``, finer inside ``(center, half_width, cell)`` zones."""
    breaks = [lo, hi]
    for c, hw, _ in zones:
        breaks += [min(max(c - hw, lo), hi), min(max(c + hw, lo), hi)]
    breaks = np.unique(breaks)
    ticks = [lo]
    for a, b in zip(breaks[:-1], breaks[1:]):
        mid = 0.5 * (a + b)
        step = min([cell] + [zc for c, hw, zc in zones if abs(mid - c) <= hw])
        n = max(1, int(math.ceil((b - a) / step - 1e-9)))
        ticks += list(np.linspace(a, b, n + 1)[1:])
    return np.array(ticks)


def box_mesh(lo, hi, cell: float, zones=None):
    """Closed, welded, outward-wound triangle mesh of an axis-aligned box.

    ``zones`` maps an axis to ``(center, half_width, cell)`` triples where the
    grid is refined.
    """
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    zones = zones or {}
    ticks = [_ticks(lo[a], hi[a], cell, zones.get(a, ())) for a in range(3)]
    n = [len(t) - 1 for t in ticks]
    verts, index, faces = [], {}, []

    def vid(i, j, k):
        key = (i, j, k)
        if key not in index:
            index[key] = len(verts)
            verts.append([ticks[0][i], ticks[1][j], ticks[2][k]])
        return index[key]

    for axis in range(3):
        a, b = (axis + 1) % 3, (axis + 2) % 3
        for side in (0, n[axis]):
            for i in range(n[a]):
                for j in range(n[b]):
                    quad = []
                    for di, dj in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        ijk = [0, 0, 0]
                        ijk[axis], ijk[a], ijk[b] = side, i + di, j + dj
                        quad.append(vid(*ijk))
                    # (a, b, axis) is a right-handed triple; flip on the low side
                    if side == 0:
                        quad = quad[::-1]
                    faces.append([quad[0], quad[1], quad[2]])
                    faces.append([quad[0], quad[2], quad[3]])
    return np.array(verts), np.array(faces, dtype=np.int64)


def _rot_y(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def vertex_normals(vertices, faces):
    v = vertices
    fn = np.cross(v[faces[:, 1]] - v[faces[:, 0]], v[faces[:, 2]] - v[faces[:, 0]])
    n = np.zeros_like(v)
    for k in range(3):
        np.add.at(n, faces[:, k], fn)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


@dataclass
class _Scene:
    faces: np.ndarray
    vertices: np.ndarray  # (T, V, 3) template
    rendered: np.ndarray  # (T, V, 3) template plus bulge
    vertex_color: np.ndarray  # (V, 3)
    object_distance: object  # points -> distance to the object surface
    object_surface: object  # (spacing) -> (points, normals)
    object_sample: object  # (rng, n) -> points
    object_color: object  # points -> rgb
    info: dict = field(default_factory=dict)


def _closing_schedule(n_frames):
    """Fraction closed per frame: linear to fully closed at T/2, then held."""
    half = max(n_frames // 2, 1)
    return np.minimum(np.arange(n_frames) / half, 1.0)


def _bulge(local_outer, amplitude, t_frac, sigma):
    # time profile sin(pi t), spatial Gaussian around the middle of the outer face
    return amplitude * math.sin(math.pi * t_frac) * np.exp(-local_outer / (2 * sigma ** 2))


def _gripper_sphere(spec: SynthSpec) -> _Scene:
    R = 0.03
    L, w, th = 0.08, 0.02, 0.012
    theta_c, opening = 0.2, 0.35
    foot = 0.65 * L
    d = R + spec.final_gap
    px = d * math.cos(theta_c) + foot * math.sin(theta_c)
    pz = -d * math.sin(theta_c) + foot * math.cos(theta_c)
    # finger in its own frame: a across thickness (outward), b along y, c down from the pivot
    zones = {2: [(-foot, 0.02, spec.contact_cell)], 1: [(0.0, w / 2, spec.contact_cell)]}
    fv, ff = box_mesh((0.0, -w / 2, -L), (th, w / 2, 0.0), spec.cell, zones)
    T = spec.n_frames
    closing = _closing_schedule(T)
    t_frac = np.arange(T) / max(T - 1, 1)
    outer = np.isclose(fv[:, 0], th)
    r2 = fv[:, 1] ** 2 + (fv[:, 2] + L / 2) ** 2
    verts, rendered, faces, colors = [], [], [], []
    for sign, base in ((1.0, (0.85, 0.45, 0.2)), (-1.0, (0.2, 0.5, 0.85))):
        mirror = np.diag([sign, 1.0, 1.0])
        per_t, per_t_r = [], []
        for t in range(T):
            theta = theta_c - opening * (1.0 - closing[t])
            Rf = mirror @ _rot_y(theta)
            local = fv.copy()
            x = local @ Rf.T + np.array([sign * px, 0.0, pz])
            per_t.append(x)
            bump = np.zeros(len(fv))
            if spec.bulge:
                bump = np.where(outer, _bulge(r2, spec.bulge, t_frac[t], 0.015), 0.0)
            lb = local.copy()
            lb[:, 0] += bump
            per_t_r.append(lb @ Rf.T + np.array([sign * px, 0.0, pz]))
        offset = sum(len(v[0]) for v in verts)
        verts.append(np.stack(per_t))
        rendered.append(np.stack(per_t_r))
        # mirrored fingers flip handedness; reverse winding to stay outward
        faces.append((ff if sign > 0 else ff[:, ::-1]) + offset)
        shade = 0.75 + 0.25 * (-fv[:, 2] / L)
        colors.append(np.asarray(base)[None, :] * shade[:, None])
    vertices = np.concatenate(verts, axis=1)
    rendered = np.concatenate(rendered, axis=1)

    def distance(p):
        return np.abs(np.linalg.norm(p, axis=-1) - R)

    def surface(spacing):
        n = int(math.ceil(4 * math.pi * R * R / spacing ** 2))
        i = np.arange(n) + 0.5
        phi = np.arccos(1 - 2 * i / n)
        golden = math.pi * (3 - math.sqrt(5))
        dirs = np.stack([np.cos(golden * i) * np.sin(phi), np.sin(golden * i) * np.sin(phi),
                         np.cos(phi)], axis=-1)
        return R * dirs, dirs

    def sample(rng, n):
        d = rng.normal(size=(n, 3))
        return R * d / np.linalg.norm(d, axis=-1, keepdims=True)

    def color(p):
        u = p / R
        return np.clip(np.stack([0.55 + 0.3 * u[:, 0], 0.55 + 0.3 * u[:, 1],
                                 0.45 + 0.25 * u[:, 2]], axis=-1), 0.0, 1.0)

    return _Scene(np.concatenate(faces), vertices, rendered, np.concatenate(colors),
                  distance, surface, sample, color, {"sphere_radius_m": R})


def _box_distance(p, half):
    q = np.abs(p) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(q.max(axis=-1), 0.0)
    return np.abs(outside + inside)


def _box_surface_points(half, spacing):
    pts, nrm = [], []
    for axis in range(3):
        a, b = (axis + 1) % 3, (axis + 2) % 3
        na = max(1, int(math.ceil(2 * half[a] / spacing)))
        nb = max(1, int(math.ceil(2 * half[b] / spacing)))
        ua = (np.arange(na) + 0.5) / na * 2 * half[a] - half[a]
        ub = (np.arange(nb) + 0.5) / nb * 2 * half[b] - half[b]
        A, B = np.meshgrid(ua, ub, indexing="ij")
        for side in (-1.0, 1.0):
            p = np.zeros((A.size, 3))
            p[:, a], p[:, b], p[:, axis] = A.ravel(), B.ravel(), side * half[axis]
            n = np.zeros_like(p)
            n[:, axis] = side
            pts.append(p)
            nrm.append(n)
    return np.concatenate(pts), np.concatenate(nrm)


def _paddle_box(spec: SynthSpec) -> _Scene:
    half = np.array([0.025, 0.025, 0.02])
    Lp, w, th = 0.08, 0.04, 0.01
    opening = 0.5
    pivot = np.array([-0.045, 0.0, half[2] + spec.final_gap])
    pv, pf = box_mesh((0.0, -w / 2, 0.0), (Lp, w / 2, th), spec.cell)
    av, af = box_mesh((-0.012, -w / 2, 0.0), (0.0, w / 2, 0.05), spec.cell)
    T = spec.n_frames
    closing = _closing_schedule(T)
    t_frac = np.arange(T) / max(T - 1, 1)
    top = np.isclose(pv[:, 2], th)
    r2 = (pv[:, 0] - Lp / 2) ** 2 + pv[:, 1] ** 2
    verts, rendered = [], []
    for t in range(T):
        Rp = _rot_y(-opening * (1.0 - closing[t]))
        bump = np.where(top, _bulge(r2, spec.bulge, t_frac[t], 0.015), 0.0) if spec.bulge else 0.0
        lb = pv.copy()
        lb[:, 2] = lb[:, 2] + bump
        arm = av + pivot
        verts.append(np.concatenate([pv @ Rp.T + pivot, arm]))
        rendered.append(np.concatenate([lb @ Rp.T + pivot, arm]))
    faces = np.concatenate([pf, af + len(pv)])
    colors = np.concatenate([
        np.array([0.3, 0.75, 0.4])[None] * (0.75 + 0.25 * pv[:, 0:1] / Lp),
        np.tile([0.6, 0.6, 0.65], (len(av), 1)),
    ])

    def distance(p):
        return _box_distance(p, half)

    def surface(spacing):
        return _box_surface_points(half, spacing)

    def sample(rng, n):
        areas = np.array([4 * half[1] * half[2], 4 * half[2] * half[0], 4 * half[0] * half[1]])
        axis = rng.choice(3, size=n, p=areas / areas.sum())
        p = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
        side = rng.choice([-1.0, 1.0], size=n)
        p[np.arange(n), axis] = side * half[axis]
        return p

    def color(p):
        u = p / half
        return np.clip(np.stack([0.6 + 0.25 * u[:, 0], 0.35 + 0.15 * u[:, 2],
                                 0.55 + 0.25 * u[:, 1]], axis=-1), 0.0, 1.0)

    return _Scene(faces, np.stack(verts), np.stack(rendered), colors, distance, surface,
                  sample, color, {"box_half_extents_m": half.tolist()})


# --------------------------------------------------------------------------
# rendering helpers


def _frame_quats(normals):
    """Quaternions whose third rotation column is the given normal."""
    n = normals / np.linalg.norm(normals, axis=-1, keepdims=True)
    ref = np.where(np.abs(n[:, :1]) < 0.9, np.array([[1.0, 0.0, 0.0]]), np.array([[0.0, 1.0, 0.0]]))
    tu = np.cross(ref, n)
    tu /= np.linalg.norm(tu, axis=-1, keepdims=True)
    tv = np.cross(n, tu)
    return rotmat_to_quat(np.stack([tu, tv, n], axis=-1))


def mesh_surfels(vertices, faces, vertex_color, spacing):
    """Dense surfels on a triangle lattice: ``(points, normals, colors, size)``."""
    v0, v1, v2 = (vertices[faces[:, k]] for k in range(3))
    pts, nrm, col = [], [], []
    fn = np.cross(v1 - v0, v2 - v0)
    fn /= np.linalg.norm(fn, axis=-1, keepdims=True)
    edge = np.max(np.stack([np.linalg.norm(v1 - v0, axis=-1), np.linalg.norm(v2 - v1, axis=-1),
                            np.linalg.norm(v0 - v2, axis=-1)]), axis=0)
    for f in range(len(faces)):
        k = max(1, int(math.ceil(edge[f] / spacing)))
        # centroids of the k*k sub-triangles of the regular subdivision
        bary = []
        for i in range(k):
            for j in range(k - i):
                bary.append(((i + 1 / 3) / k, (j + 1 / 3) / k))
                if i + j < k - 1:
                    bary.append(((i + 2 / 3) / k, (j + 2 / 3) / k))
        b = np.array(bary)
        w = np.stack([1 - b[:, 0] - b[:, 1], b[:, 0], b[:, 1]], axis=-1)
        tri = np.stack([v0[f], v1[f], v2[f]])
        pts.append(w @ tri)
        nrm.append(np.repeat(fn[f:f + 1], len(b), axis=0))
        col.append(w @ vertex_color[faces[f]])
    return np.concatenate(pts), np.concatenate(nrm), np.concatenate(col)


def ring_cameras(n_views, width, height, distance, fov_deg, target=(0.0, 0.0, 0.0)):
    """Cameras on a ring around the target, elevation alternating +/-25 degrees."""
    f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
    cams = []
    for i in range(n_views):
        az = 2 * math.pi * i / n_views
        el = math.radians(25.0 if i % 2 == 0 else -25.0)
        eye = np.asarray(target) + distance * np.array(
            [math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
        cams.append(Camera.look_at(eye, target, (0.0, 0.0, 1.0), f, f, width, height))
    return cams


# --------------------------------------------------------------------------
# generation


def _build(spec: SynthSpec) -> _Scene:
    return _gripper_sphere(spec) if spec.kind == "gripper-sphere" else _paddle_box(spec)


def ground_truth(vertices, object_distance, tau: float, hand: str = "right") -> GroundTruth:
    """Template vertices closer than ``tau`` to the object surface, per frame and in any frame."""
    T, V = vertices.shape[:2]
    dist = np.stack([object_distance(vertices[t]) for t in range(T)])
    per = dist < tau
    return GroundTruth(tau, {hand: per.any(axis=0)}, {hand: per}, {hand: dist.min(axis=0)})


def generate(spec: SynthSpec):
    """Build a scene bundle and its analytic ground truth. Deterministic in ``spec.seed``."""
    scene = _build(spec)
    root = np.random.SeedSequence(spec.seed)
    seed_ss, noise_ss = root.spawn(2)
    # round-trip the template through float32, the on-disk precision
    vertices = scene.vertices.astype(np.float32).astype(np.float64)
    rendered = scene.rendered.astype(np.float32).astype(np.float64)
    if not spec.bulge:
        rendered = vertices
    template = TemplateSequence(scene.faces, vertices, {"kind": spec.kind, "source": "synthetic"})

    obj_p, obj_n = scene.object_surface(spec.gt_spacing)
    obj_c = scene.object_color(obj_p)
    cams = ring_cameras(spec.n_views, spec.width, spec.height, spec.camera_distance, spec.fov_deg)
    size = math.log(0.8 * spec.gt_spacing)
    op = math.log(0.95 / 0.05)
    N, T, H, W = spec.n_views, spec.n_frames, spec.height, spec.width
    images = np.zeros((N, T, H, W, 3), dtype=np.uint8)
    masks = np.zeros((N, T, H, W), dtype=bool)
    noise_rngs = [np.random.default_rng(s) for s in noise_ss.spawn(N * T)]
    for t in range(T):
        hp, hn, hc = mesh_surfels(rendered[t], scene.faces, scene.vertex_color, spec.gt_spacing)
        p = np.concatenate([hp, obj_p])
        q = _frame_quats(np.concatenate([hn, obj_n]))
        c = np.concatenate([hc, obj_c])
        ls = np.full((len(p), 2), size)
        ol = np.full(len(p), op)
        for v in range(N):
            out = render(p, q, ls, ol, c, cams[v])
            img = out.color
            if spec.noise > 0:
                img = img + noise_rngs[v * T + t].normal(scale=spec.noise, size=img.shape)
            images[v, t] = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
            masks[v, t] = out.alpha > 0.5
    rng = np.random.default_rng(seed_ss)
    seed_pts = scene.object_sample(rng, spec.n_seed)
    seed_col = np.round(scene.object_color(seed_pts) * 255.0).astype(np.uint8)
    metadata = {
        "tau_m": spec.tau,
        "tau_v_m": spec.tau / math.sqrt(3.0),
        "units": "meters",
        "frame_rate": 30.0,
        "generator": spec.to_dict(),
        "scene": scene.info,
    }
    bundle = SceneBundle(cams, images, masks, {"right": template}, seed_pts, seed_col, metadata)
    gt = ground_truth(vertices, scene.object_distance, spec.tau)
    return bundle, gt


# --------------------------------------------------------------------------
# oracles


def brute_force_contact(hand, obj, tau: float = DEFAULT_TAU) -> ContactMap:
    """Exhaustive nearest object point for every hand point; ties go to the lowest index."""
    hand = np.asarray(hand, dtype=np.float64).reshape(-1, 3)
    obj = np.asarray(obj, dtype=np.float64).reshape(-1, 3)
    if len(obj) == 0:
        n = len(hand)
        return ContactMap(np.zeros(n, dtype=bool), np.full(n, np.inf), np.full(n, -1, dtype=np.int64), tau)
    dist = np.empty(len(hand))
    idx = np.empty(len(hand), dtype=np.int64)
    for i, h in enumerate(hand):
        d = h - obj
        d2 = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]
        k = int(np.argmin(d2))
        idx[i] = k
        dist[i] = math.sqrt(d2[k])
    return ContactMap(dist < tau, dist, idx, tau)


def fd_gradient(f, x, h: float = 1e-5):
    """Central-difference gradient of a scalar function of a float64 vector."""
    x = np.array(x, dtype=np.float64, copy=True)
    flat = x.reshape(-1)
    g = np.empty_like(flat)
    for i in range(len(flat)):
        xi = flat[i]
        flat[i] = xi + h
        fp = float(f(x))
        flat[i] = xi - h
        fm = float(f(x))
        flat[i] = xi
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFinite(f"function not finite near coordinate {i}")
        g[i] = (fp - fm) / (2 * h)
    return g.reshape(x.shape)
