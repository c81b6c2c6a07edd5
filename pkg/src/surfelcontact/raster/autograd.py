"""torch autograd bridge around the numba rasterizer."""
from __future__ import annotations

import numpy as np
import torch

from ..geometry import Camera
from .render import GradientBuffer, TILE, render, render_backward


class RenderContext:
    """Non-tensor settings plus the gradient buffer of the latest backward pass."""

    def __init__(self, camera: Camera, background=(0.0, 0.0, 0.0), tile: int = TILE):
        self.camera = camera
        self.background = np.broadcast_to(np.asarray(background, dtype=np.float64), (3,)).copy()
        self.tile = tile
        self.grads: GradientBuffer | None = None
        self.forward = None


def _np(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().astype(np.float64, copy=False)


class _SurfelRasterize(torch.autograd.Function):
    @staticmethod
    def forward(ctx, means, quats, log_scales, opacity_logits, colors, rctx: RenderContext):
        arrays = [_np(a) for a in (means, quats, log_scales, opacity_logits, colors)]
        out = render(*arrays, rctx.camera, rctx.background, rctx.tile)
        rctx.forward = out
        ctx.rctx = rctx
        ctx.arrays = arrays
        ctx.out = out
        dt = means.dtype
        return tuple(torch.from_numpy(a).to(dt) for a in
                     (out.color, out.alpha, out.depth, out.normal, out.distortion))

    @staticmethod
    def backward(ctx, g_color, g_alpha, g_depth, g_normal, g_dist):
        rctx = ctx.rctx
        gb = render_backward(*ctx.arrays, rctx.camera, _np(g_color), _np(g_alpha), _np(g_depth),
                             _np(g_normal), _np(g_dist), rctx.background, rctx.tile,
                             forward=ctx.out)
        rctx.grads = gb
        dt = g_color.dtype
        return (torch.from_numpy(gb.position).to(dt), torch.from_numpy(gb.rotation).to(dt),
                torch.from_numpy(gb.log_scale).to(dt), torch.from_numpy(gb.opacity_logit).to(dt),
                torch.from_numpy(gb.color).to(dt), None)


def rasterize(means, quats, log_scales, opacity_logits, colors, rctx: RenderContext):
    """Differentiable render; returns dict of color, alpha, depth, normal, distortion."""
    color, alpha, depth, normal, dist = _SurfelRasterize.apply(
        means, quats, log_scales, opacity_logits, colors, rctx)
    return {"color": color, "alpha": alpha, "depth": depth, "normal": normal, "distortion": dist}
