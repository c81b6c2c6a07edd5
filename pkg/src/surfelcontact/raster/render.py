from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import Camera, quat_to_rotmat
from . import kernels

TILE = 16
NEAR = 0.01
FILTER_RADIUS = 1.5  # 3 sigma of the 0.5 px screen-space filter


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W)
    depth: np.ndarray  # (H, W) camera z, meters
    normal: np.ndarray  # (H, W, 3) world frame, unnormalized blend
    distortion: np.ndarray  # (H, W)
    transmittance: np.ndarray = field(repr=False, default=None)
    n_contrib: np.ndarray = field(repr=False, default=None)
    touched: np.ndarray = field(repr=False, default=None)  # per-surfel pixel count


@dataclass
class GradientBuffer:
    """Per-surfel gradients of a scalar through one render.

    ``screen`` holds the norm of the gradient w.r.t. the projected center, in
    normalized device units (pixel gradient times half the image size).
    """

    position: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: np.ndarray
    color: np.ndarray
    screen: np.ndarray
    visible: np.ndarray

    def accumulate_into(self, accum: np.ndarray, counts: np.ndarray):
        accum += np.where(self.visible, self.screen, 0.0)
        counts += self.visible


class _Prepared:
    """Per-camera geometry shared by the forward and backward kernels."""

    def __init__(self, means, quats, log_scales, opacity_logits, colors, camera: Camera,
                 tile: int):
        self.n = len(means)
        self.means = np.ascontiguousarray(means, dtype=np.float64).reshape(-1, 3)
        self.quats = np.asarray(quats, dtype=np.float64).reshape(-1, 4)
        R = quat_to_rotmat(self.quats) if self.n else np.zeros((0, 3, 3))
        self.R = R
        self.tu = np.ascontiguousarray(R[:, :, 0])
        self.tv = np.ascontiguousarray(R[:, :, 1])
        self.nrm = np.ascontiguousarray(R[:, :, 2])
        ls = np.asarray(log_scales, dtype=np.float64).reshape(-1, 2)
        self.su = np.ascontiguousarray(np.exp(ls[:, 0]))
        self.sv = np.ascontiguousarray(np.exp(ls[:, 1]))
        self.opac = 1.0 / (1.0 + np.exp(-np.asarray(opacity_logits, dtype=np.float64).reshape(-1)))
        self.colors = np.ascontiguousarray(colors, dtype=np.float64).reshape(-1, 3)
        self.camera = camera
        self.tile = int(tile)
        o = camera.center
        self.o = o
        xc = camera.to_camera(self.means)
        self.xc = xc
        z = xc[:, 2]
        self.zc = np.ascontiguousarray(z)
        valid = z > NEAR
        zsafe = np.where(valid, z, 1.0)
        self.mu2d = np.stack([camera.fx * xc[:, 0] / zsafe + camera.cx,
                              camera.fy * xc[:, 1] / zsafe + camera.cy], axis=-1)
        self.nsign = np.where(np.einsum("ij,ij->i", self.nrm, self.means - o) > 0, -1.0, 1.0)
        self.bbox, self.valid = self._bbox(valid)
        W, H = camera.width, camera.height
        self.n_tx = (W + self.tile - 1) // self.tile
        self.n_ty = (H + self.tile - 1) // self.tile
        self.offsets, self.ids = kernels.bin_tiles(self.bbox, self.valid, self.n_tx, self.n_ty,
                                                   self.tile)

    def _bbox(self, valid):
        cam = self.camera
        W, H = cam.width, cam.height
        bbox = np.zeros((self.n, 4), dtype=np.int64)
        if self.n == 0:
            return bbox, valid
        lo = np.full((self.n, 2), np.inf)
        hi = np.full((self.n, 2), -np.inf)
        full = np.zeros(self.n, dtype=bool)
        for a in (-3.0, 3.0):
            for b in (-3.0, 3.0):
                c = (self.means + a * self.su[:, None] * self.tu
                     + b * self.sv[:, None] * self.tv)
                cc = cam.to_camera(c)
                behind = cc[:, 2] <= NEAR
                full |= behind
                zs = np.where(behind, 1.0, cc[:, 2])
                uv = np.stack([cam.fx * cc[:, 0] / zs + cam.cx, cam.fy * cc[:, 1] / zs + cam.cy], -1)
                lo = np.minimum(lo, uv)
                hi = np.maximum(hi, uv)
        lo = np.minimum(lo, self.mu2d) - FILTER_RADIUS
        hi = np.maximum(hi, self.mu2d) + FILTER_RADIUS
        lo[full] = 0
        hi[full] = [W - 1, H - 1]
        lo = np.nan_to_num(lo, nan=0.0, posinf=1e9, neginf=-1e9)
        hi = np.nan_to_num(hi, nan=0.0, posinf=1e9, neginf=-1e9)
        x0 = np.clip(np.ceil(lo[:, 0]), 0, W - 1)
        y0 = np.clip(np.ceil(lo[:, 1]), 0, H - 1)
        x1 = np.clip(np.floor(hi[:, 0]), 0, W - 1)
        y1 = np.clip(np.floor(hi[:, 1]), 0, H - 1)
        onscreen = (np.floor(hi[:, 0]) >= 0) & (np.ceil(lo[:, 0]) <= W - 1) \
            & (np.floor(hi[:, 1]) >= 0) & (np.ceil(lo[:, 1]) <= H - 1) \
            & (np.floor(hi[:, 0]) >= np.ceil(lo[:, 0])) & (np.floor(hi[:, 1]) >= np.ceil(lo[:, 1]))
        bbox[:] = np.stack([x0, y0, x1, y1], -1).astype(np.int64)
        return bbox, valid & onscreen

    def kernel_args(self):
        cam = self.camera
        return (self.means, self.tu, self.tv, self.nrm, self.nsign, self.su, self.sv, self.opac,
                self.colors, self.mu2d, self.zc, self.bbox, self.offsets, self.ids, cam.R, self.o,
                float(cam.fx), float(cam.fy), float(cam.cx), float(cam.cy), int(cam.width),
                int(cam.height), self.tile, NEAR)


def _bg(background):
    return np.broadcast_to(np.asarray(background, dtype=np.float64), (3,)).copy()


def render(means, quats, log_scales, opacity_logits, colors, camera: Camera,
           background=(0.0, 0.0, 0.0), tile: int = TILE) -> RenderOutput:
    """Splat world-space surfels into ``camera``.

    Surfel attributes use the optimizer parameterization: unnormalized
    quaternions, log-scales and opacity logits. ``colors`` are RGB values.
    """
    prep = _Prepared(means, quats, log_scales, opacity_logits, colors, camera, tile)
    color, alpha, depth, normal, dist, trans, n_contrib, touched = kernels.forward(
        *prep.kernel_args(), _bg(background))
    return RenderOutput(color, alpha, depth, normal, dist, trans, n_contrib, touched)


def _rotation_chain(q, g_tu, g_tv):
    """Chain gradients w.r.t. the first two rotation columns to the raw quaternion."""
    qn = np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q / qn, -1, 0)
    # columns: R[:,0] = (R00, R10, R20), R[:,1] = (R01, R11, R21)
    a0, a1, a2 = g_tu[:, 0], g_tu[:, 1], g_tu[:, 2]
    b0, b1, b2 = g_tv[:, 0], g_tv[:, 1], g_tv[:, 2]
    gw = a1 * 2 * z + a2 * -2 * y + b0 * -2 * z + b2 * 2 * x
    gx = a1 * 2 * y + a2 * 2 * z + b0 * 2 * y + b1 * -4 * x + b2 * 2 * w
    gy = a0 * -4 * y + a1 * 2 * x + a2 * -2 * w + b0 * 2 * x + b2 * 2 * z
    gz = a0 * -4 * z + a1 * 2 * w + a2 * 2 * x + b0 * -2 * w + b1 * -4 * z + b2 * 2 * y
    gqh = np.stack([gw, gx, gy, gz], -1)
    qh = q / qn
    return (gqh - qh * np.sum(qh * gqh, -1, keepdims=True)) / qn


def render_backward(means, quats, log_scales, opacity_logits, colors, camera: Camera,
                    grad_color=None, grad_alpha=None, grad_depth=None, grad_normal=None,
                    grad_distortion=None, background=(0.0, 0.0, 0.0), tile: int = TILE,
                    forward: RenderOutput | None = None) -> GradientBuffer:
    """Analytic gradients of ``sum(grad_* * output_*)`` w.r.t. every surfel attribute."""
    prep = _Prepared(means, quats, log_scales, opacity_logits, colors, camera, tile)
    H, W = camera.height, camera.width
    bg = _bg(background)
    if forward is None:
        forward = render(means, quats, log_scales, opacity_logits, colors, camera, bg, tile)

    def g(x, shape):
        if x is None:
            return np.zeros(shape)
        return np.ascontiguousarray(np.broadcast_to(np.asarray(x, dtype=np.float64), shape))

    out = kernels.backward(*prep.kernel_args(), bg, forward.n_contrib, forward.transmittance,
                           g(grad_color, (H, W, 3)), g(grad_alpha, (H, W)),
                           g(grad_depth, (H, W)), g(grad_normal, (H, W, 3)),
                           g(grad_distortion, (H, W)))
    g_means, g_tu, g_tv, g_su, g_sv, g_op, g_col, g_mu = out
    n = prep.n
    if n == 0:
        z0 = np.zeros((0,))
        return GradientBuffer(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 2)), z0,
                              np.zeros((0, 3)), z0, np.zeros((0,), dtype=bool))
    # screen-space filter branch: projected center -> mean
    xc = prep.xc
    zs = np.where(xc[:, 2] > NEAR, xc[:, 2], 1.0)
    gxc = np.stack([g_mu[:, 0] * camera.fx / zs,
                    g_mu[:, 1] * camera.fy / zs,
                    -(g_mu[:, 0] * camera.fx * xc[:, 0] + g_mu[:, 1] * camera.fy * xc[:, 1]) / zs ** 2],
                   -1)
    g_means = g_means + gxc @ camera.R
    g_rot = _rotation_chain(prep.quats, g_tu, g_tv)
    g_ls = np.stack([g_su * prep.su, g_sv * prep.sv], -1)
    g_logit = g_op * prep.opac * (1.0 - prep.opac)
    gc = g_means @ camera.R.T
    screen = np.hypot(gc[:, 0] * zs / camera.fx * W / 2.0, gc[:, 1] * zs / camera.fy * H / 2.0)
    visible = forward.touched > 0
    return GradientBuffer(g_means, g_rot, g_ls, g_logit, g_col, screen, visible)


def ray_splat_intersect(mean, quat, log_scale, origin, direction, near: float = NEAR):
    """Intersect a ray with a surfel's plane.

    Returns ``(u, v, depth)`` with ``(u, v)`` in units of the surfel's standard
    deviations and ``depth`` the distance along the unit ray, or ``None`` on a
    miss (plane parallel to the ray, or hit at/behind ``near``).
    """
    R = quat_to_rotmat(quat)
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    n = R[:, 2]
    w = np.asarray(mean, dtype=np.float64) - np.asarray(origin, dtype=np.float64)
    b = n @ d
    if abs(b) < kernels.PARALLEL_EPS:
        return None
    t = (n @ w) / b
    if t <= near:
        return None
    e = t * d - w
    s = np.exp(np.asarray(log_scale, dtype=np.float64))
    return (R[:, 0] @ e) / s[0], (R[:, 1] @ e) / s[1], t
