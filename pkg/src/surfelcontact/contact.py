"""Hand-object contact from surfel center distances.

A hand surfel is in contact when its nearest object surfel lies strictly
closer than ``tau``. Nearest neighbors come from a uniform spatial hash and
are exact: ties resolve to the lowest object index, like a brute-force scan.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

DEFAULT_TAU = 0.004


class EmptySequence(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


@dataclass
class ContactMap:
    in_contact: np.ndarray  # (N,) bool
    distance: np.ndarray  # (N,) meters, +inf without objects
    nearest: np.ndarray  # (N,) object index, -1 without objects
    tau: float = DEFAULT_TAU

    def __len__(self):
        return len(self.in_contact)

    def scalar(self) -> np.ndarray:
        """Single-array form: the distance where in contact, else 0."""
        return np.where(self.in_contact, self.distance, 0.0)

    def to_json(self) -> dict:
        return {
            "tau_m": self.tau,
            "tau_v_m": self.tau / math.sqrt(3.0),
            "units": "meters",
            "in_contact": self.in_contact.astype(int).tolist(),
            "distance_m": [None if not np.isfinite(d) else float(d) for d in self.distance],
            "nearest": self.nearest.tolist(),
        }


@dataclass
class AccumulatedContact:
    ever_contact: np.ndarray
    min_distance: np.ndarray
    n_frames: int
    vertex_labels: dict = field(default_factory=dict)  # hand name -> (V,) bool


@dataclass
class VoxelGrid:
    size: float
    origin: np.ndarray
    occupancy: dict  # (i, j, k) -> {"has_hand": bool, "has_object": bool}


# --------------------------------------------------------------------------
# spatial hash


@njit(cache=True)
def _nearest_hash(query, pts, origin, cell, dims, keys_sorted, perm):
    n = query.shape[0]
    m = pts.shape[0]
    best_d2 = np.full(n, np.inf)
    best_i = np.full(n, -1, dtype=np.int64)
    nx, ny, nz = dims[0], dims[1], dims[2]
    for qi in range(n):
        q0 = query[qi, 0]
        q1 = query[qi, 1]
        q2 = query[qi, 2]
        cx = int(math.floor((q0 - origin[0]) / cell))
        cy = int(math.floor((q1 - origin[1]) / cell))
        cz = int(math.floor((q2 - origin[2]) / cell))
        # smallest ring that touches the grid
        r0 = 0
        for c, nd in ((cx, nx), (cy, ny), (cz, nz)):
            if c < 0:
                r0 = max(r0, -c)
            elif c >= nd:
                r0 = max(r0, c - nd + 1)
        r_all = max(max(abs(cx), abs(cx - nx + 1)), max(max(abs(cy), abs(cy - ny + 1)),
                                                          max(abs(cz), abs(cz - nz + 1))))
        bd = np.inf
        bi = -1
        r = r0
        brute = False
        while r <= r_all:
            if r - r0 > 6:
                brute = True
                break
            for ix in range(max(cx - r, 0), min(cx + r, nx - 1) + 1):
                for iy in range(max(cy - r, 0), min(cy + r, ny - 1) + 1):
                    on_shell_xy = abs(ix - cx) == r or abs(iy - cy) == r
                    for iz in range(max(cz - r, 0), min(cz + r, nz - 1) + 1):
                        if not on_shell_xy and abs(iz - cz) != r:
                            continue
                        key = (ix * ny + iy) * nz + iz
                        lo = np.searchsorted(keys_sorted, key)
                        j = lo
                        while j < m and keys_sorted[j] == key:
                            k = perm[j]
                            d0 = q0 - pts[k, 0]
                            d1 = q1 - pts[k, 1]
                            d2 = q2 - pts[k, 2]
                            dd = d0 * d0 + d1 * d1 + d2 * d2
                            if dd < bd or (dd == bd and k < bi):
                                bd = dd
                                bi = k
                            j += 1
            # unvisited cells are at least r * cell away
            if bi >= 0 and math.sqrt(bd) <= r * cell:
                break
            r += 1
        if brute:
            for k in range(m):
                d0 = q0 - pts[k, 0]
                d1 = q1 - pts[k, 1]
                d2 = q2 - pts[k, 2]
                dd = d0 * d0 + d1 * d1 + d2 * d2
                if dd < bd or (dd == bd and k < bi):
                    bd = dd
                    bi = k
        best_d2[qi] = bd
        best_i[qi] = bi
    return best_d2, best_i


class SpatialHash:
    """Uniform grid over a fixed point set; built once, then read-only."""

    def __init__(self, points, cell: float):
        if cell <= 0:
            raise ValueError("cell size must be positive")
        self.points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
        self.cell = float(cell)
        self.origin = self.points.min(axis=0) if len(self.points) else np.zeros(3)
        ijk = np.floor((self.points - self.origin) / self.cell).astype(np.int64)
        self.dims = (ijk.max(axis=0) + 1) if len(self.points) else np.ones(3, dtype=np.int64)
        keys = (ijk[:, 0] * self.dims[1] + ijk[:, 1]) * self.dims[2] + ijk[:, 2]
        self.perm = np.argsort(keys, kind="stable")
        self.keys = keys[self.perm]

    def nearest(self, query):
        """Return ``(squared distance, index)`` of the nearest stored point."""
        q = np.ascontiguousarray(query, dtype=np.float64).reshape(-1, 3)
        if len(self.points) == 0:
            return np.full(len(q), np.inf), np.full(len(q), -1, dtype=np.int64)
        return _nearest_hash(q, self.points, self.origin, self.cell,
                             self.dims.astype(np.int64), self.keys, self.perm)


def instantaneous_contact(hand, obj, tau: float = DEFAULT_TAU) -> ContactMap:
    """Per-hand-surfel nearest object surfel and strict ``< tau`` contact flag."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    hand = np.asarray(hand, dtype=np.float64).reshape(-1, 3)
    d2, idx = SpatialHash(obj, tau).nearest(hand)
    dist = np.sqrt(d2)
    return ContactMap(dist < tau, dist, idx, tau)


def accumulate(maps) -> AccumulatedContact:
    maps = list(maps)
    if not maps:
        raise EmptySequence("no contact maps to accumulate")
    ever = np.zeros(len(maps[0]), dtype=bool)
    mind = np.full(len(maps[0]), np.inf)
    for m in maps:
        if len(m) != len(ever):
            raise LengthMismatch("contact maps cover different surfel arrays")
        ever |= m.in_contact
        mind = np.minimum(mind, m.distance)
    return AccumulatedContact(ever, mind, len(maps))


def project_to_template(ever_contact, triangle_ids, faces, n_vertices: int) -> np.ndarray:
    """A vertex is contacted iff a contacting surfel is bound to an incident triangle."""
    faces = np.asarray(faces, dtype=np.int64)
    tri = np.asarray(triangle_ids, dtype=np.int64)[np.asarray(ever_contact, dtype=bool)]
    labels = np.zeros(n_vertices, dtype=bool)
    if len(tri):
        labels[faces[np.unique(tri)].ravel()] = True
    return labels


def label_contact_voxels(positions, tags, tau: float = DEFAULT_TAU, object_tag0: int = 2):
    """Voxelize at ``tau / sqrt(3)`` and find voxels holding both hand and object surfels.

    Returns ``(VoxelGrid, contact voxel set, indices of surfels inside them)``.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    p = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    tags = np.asarray(tags)
    size = tau / math.sqrt(3.0)
    if len(p) == 0:
        return VoxelGrid(size, np.zeros(3), {}), set(), np.zeros(0, dtype=np.int64)
    origin = p.min(axis=0) - size / 2.0
    ijk = np.floor((p - origin) / size).astype(np.int64)
    is_hand = tags < object_tag0
    uniq, inv = np.unique(ijk, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    has_hand = np.zeros(len(uniq), dtype=bool)
    has_obj = np.zeros(len(uniq), dtype=bool)
    np.logical_or.at(has_hand, inv, is_hand)
    np.logical_or.at(has_obj, inv, ~is_hand)
    occupancy = {tuple(int(c) for c in u): {"has_hand": bool(h), "has_object": bool(o)}
                 for u, h, o in zip(uniq, has_hand, has_obj)}
    contact_cells = has_hand & has_obj
    contact = {tuple(int(c) for c in u) for u in uniq[contact_cells]}
    members = np.nonzero(contact_cells[inv])[0]
    return VoxelGrid(size, origin, occupancy), contact, members


def contact_metrics(pred, gt):
    """IoU and F1 of binary labels. IoU is 1 when both sets are empty."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise LengthMismatch(f"label lengths differ: {pred.shape} vs {gt.shape}")
    inter = np.sum(pred & gt)
    union = np.sum(pred | gt)
    iou = 1.0 if union == 0 else inter / union
    tp = inter
    precision = tp / pred.sum() if pred.sum() else 0.0
    recall = tp / gt.sum() if gt.sum() else 0.0
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return float(iou), float(f1)


def distance_colormap(distance, tau: float):
    """Blue (touching) to red (at tau) over [0, tau]; farther surfels stay red."""
    t = np.clip(np.asarray(distance, dtype=np.float64) / tau, 0.0, 1.0)
    t = np.where(np.isfinite(t), t, 1.0)
    return np.stack([t, np.zeros_like(t), 1.0 - t], axis=-1)
