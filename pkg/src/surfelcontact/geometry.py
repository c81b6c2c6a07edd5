"""Quaternions, triangle frames, pinhole cameras and positional encoding.

Quaternions are stored as ``(w, x, y, z)``. All numpy helpers are batched over
leading dimensions and work in float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

DEGENERATE_AREA = 1e-12
NEAR_PLANE = 1e-6


class DegenerateTriangle(ValueError):
    pass


class BehindCamera(ValueError):
    pass


# --------------------------------------------------------------------------
# quaternions


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n <= 1e-12):
        raise ValueError("quaternion norm must exceed 1e-12")
    return q / n


def quat_to_rotmat(q):
    """Rotation matrix of a (possibly unnormalized) quaternion."""
    w, x, y, z = np.moveaxis(quat_normalize(q), -1, 0)
    R = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return R.reshape(R.shape[:-1] + (3, 3))


def rotmat_to_quat(R):
    """Quaternion (w >= 0 where possible) of a rotation matrix, Shepperd's method."""
    R = np.asarray(R, dtype=np.float64)
    batch = R.shape[:-2]
    R = R.reshape(-1, 3, 3)
    q = np.empty((R.shape[0], 4))
    tr = R[:, 0, 0] + R[:, 1, 1] + R[:, 2, 2]
    diag = np.stack([R[:, 0, 0], R[:, 1, 1], R[:, 2, 2]], axis=-1)
    case = np.where(tr > diag.max(axis=-1), 3, diag.argmax(axis=-1))
    for c in range(4):
        m = case == c
        if not m.any():
            continue
        r = R[m]
        if c == 3:
            s = 2.0 * np.sqrt(1.0 + tr[m])
            q[m] = np.stack([0.25 * s, (r[:, 2, 1] - r[:, 1, 2]) / s,
                             (r[:, 0, 2] - r[:, 2, 0]) / s, (r[:, 1, 0] - r[:, 0, 1]) / s], -1)
        elif c == 0:
            s = 2.0 * np.sqrt(1.0 + r[:, 0, 0] - r[:, 1, 1] - r[:, 2, 2])
            q[m] = np.stack([(r[:, 2, 1] - r[:, 1, 2]) / s, 0.25 * s,
                             (r[:, 0, 1] + r[:, 1, 0]) / s, (r[:, 0, 2] + r[:, 2, 0]) / s], -1)
        elif c == 1:
            s = 2.0 * np.sqrt(1.0 + r[:, 1, 1] - r[:, 0, 0] - r[:, 2, 2])
            q[m] = np.stack([(r[:, 0, 2] - r[:, 2, 0]) / s, (r[:, 0, 1] + r[:, 1, 0]) / s,
                             0.25 * s, (r[:, 1, 2] + r[:, 2, 1]) / s], -1)
        else:
            s = 2.0 * np.sqrt(1.0 + r[:, 2, 2] - r[:, 0, 0] - r[:, 1, 1])
            q[m] = np.stack([(r[:, 1, 0] - r[:, 0, 1]) / s, (r[:, 0, 2] + r[:, 2, 0]) / s,
                             (r[:, 1, 2] + r[:, 2, 1]) / s, 0.25 * s], -1)
    q *= np.where(q[:, :1] < 0, -1.0, 1.0)
    return q.reshape(batch + (4,))


def quat_multiply(a, b):
    """Hamilton product ``a * b``; works on numpy arrays and torch tensors."""
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    out = (
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    )
    if isinstance(a, torch.Tensor) or isinstance(b, torch.Tensor):
        return torch.stack(out, dim=-1)
    return np.stack(out, axis=-1)


def quat_to_rotmat_torch(q: torch.Tensor) -> torch.Tensor:
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    R = torch.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        dim=-1,
    )
    return R.reshape(q.shape[:-1] + (3, 3))


def random_rotation(rng: np.random.Generator, size=None):
    q = rng.normal(size=(4,) if size is None else (size, 4))
    return quat_to_rotmat(q)


# --------------------------------------------------------------------------
# triangle frames


@dataclass(frozen=True)
class TriangleFrame:
    R: np.ndarray  # (..., 3, 3), columns: edge, normal, edge x normal
    T: np.ndarray  # (..., 3) barycenter
    s: np.ndarray  # (...,) sqrt(area)


def triangle_areas(v0, v1, v2):
    return 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=-1)


def triangle_frame(v0, v1, v2) -> TriangleFrame:
    """Local frame of one triangle or a batch of triangles.

    The rotation maps local coordinates to world coordinates. Its columns are
    the unit edge ``v1 - v0``, the unit face normal (right-handed winding) and
    their cross product. The isotropic scale is ``sqrt(area)``.
    """
    v0, v1, v2 = (np.asarray(v, dtype=np.float64) for v in (v0, v1, v2))
    e = v1 - v0
    nrm = np.cross(e, v2 - v0)
    area = 0.5 * np.linalg.norm(nrm, axis=-1)
    if np.any(area < DEGENERATE_AREA):
        raise DegenerateTriangle(f"triangle area below {DEGENERATE_AREA} m^2")
    a = e / np.linalg.norm(e, axis=-1, keepdims=True)
    n = nrm / np.linalg.norm(nrm, axis=-1, keepdims=True)
    b = np.cross(a, n)
    R = np.stack([a, n, b], axis=-1)
    return TriangleFrame(R=R, T=(v0 + v1 + v2) / 3.0, s=np.sqrt(area))


def mesh_frames(vertices: np.ndarray, faces: np.ndarray) -> TriangleFrame:
    v = np.asarray(vertices, dtype=np.float64)
    return triangle_frame(v[faces[:, 0]], v[faces[:, 1]], v[faces[:, 2]])


# --------------------------------------------------------------------------
# positional encoding


def posenc(p, L: int):
    """Sinusoidal encoding: for k in 0..L-1, ``sin(2^k pi p)`` then ``cos(2^k pi p)``.

    Accepts numpy arrays or torch tensors; the last axis is the feature axis.
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    if isinstance(p, torch.Tensor):
        parts = []
        for k in range(L):
            a = (2.0 ** k) * np.pi * p
            parts += [torch.sin(a), torch.cos(a)]
        return torch.cat(parts, dim=-1)
    p = np.atleast_1d(np.asarray(p, dtype=np.float64))
    parts = []
    for k in range(L):
        a = (2.0 ** k) * np.pi * p
        parts += [np.sin(a), np.cos(a)]
    return np.concatenate(parts, axis=-1)


# --------------------------------------------------------------------------
# cameras


@dataclass
class Camera:
    """Pinhole camera. Pixel ``(col, row)`` is the image point ``u=col, v=row``."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray = field(default_factory=lambda: np.eye(3))  # world -> camera
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def to_camera(self, x):
        return np.asarray(x, dtype=np.float64) @ self.R.T + self.t

    def pixel_rays(self):
        """World-space ray directions, one per pixel, scaled to unit camera depth."""
        cols, rows = np.meshgrid(np.arange(self.width), np.arange(self.height))
        d_cam = np.stack([(cols - self.cx) / self.fx, (rows - self.cy) / self.fy,
                          np.ones(cols.shape)], axis=-1)
        return d_cam @ self.R

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "R": self.R.tolist(), "t": self.t.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]),
                   np.array(d["R"]), np.array(d["t"]))

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height) -> "Camera":
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        z = target - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        return cls(fx, fy, (width - 1) / 2.0, (height - 1) / 2.0, width, height, R, -R @ eye)


def project(camera: Camera, x):
    """Project world point(s) to ``(u, v, depth)``; raises BehindCamera."""
    xc = camera.to_camera(x)
    z = xc[..., 2]
    if np.any(z <= NEAR_PLANE):
        raise BehindCamera("point at or behind the camera plane")
    u = camera.fx * xc[..., 0] / z + camera.cx
    v = camera.fy * xc[..., 1] / z + camera.cy
    return u, v, z
