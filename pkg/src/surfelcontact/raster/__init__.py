"""Differentiable tile-based splatting of 2D Gaussian surfels."""
from .render import (GradientBuffer, RenderOutput, TILE, NEAR, render, render_backward,
                     ray_splat_intersect)

__all__ = ["GradientBuffer", "RenderOutput", "TILE", "NEAR", "render", "render_backward",
           "ray_splat_intersect"]
