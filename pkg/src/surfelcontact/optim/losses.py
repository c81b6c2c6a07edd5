"""Training losses. All inputs are torch tensors; images are ``(H, W, 3)``."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F


class DimensionMismatch(ValueError):
    pass


class NonFinite(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    ssim: float = 0.2  # D-SSIM share of the photometric term
    distortion: float = 100.0
    normal: float = 0.005
    position: float = 0.01
    scale: float = 1.0
    isotropic: float = 0.1
    scale_ratio: float = 0.4

    def __post_init__(self):
        if any(v < 0 for v in self.__dict__.values()):
            raise ValueError("loss weights must be nonnegative")


def _gaussian_1d(size=11, sigma=1.5, dtype=torch.float64):
    x = torch.arange(size, dtype=dtype) - size // 2
    g = torch.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _blur(x, g):
    # separable Gaussian, zero padded; equals the 2D window up to rounding
    C, k = x.shape[1], g.shape[0]
    x = F.conv2d(x, g.view(1, 1, 1, k).expand(C, 1, 1, k), padding=(0, k // 2), groups=C)
    return F.conv2d(x, g.view(1, 1, k, 1).expand(C, 1, k, 1), padding=(k // 2, 0), groups=C)


def ssim(img1: torch.Tensor, img2: torch.Tensor, window_size: int = 11, sigma: float = 1.5):
    """Mean SSIM of two ``(H, W, C)`` images, zero-padded Gaussian window."""
    a = img1.permute(2, 0, 1)[None]
    b = img2.permute(2, 0, 1)[None]
    g = _gaussian_1d(window_size, sigma, img1.dtype)
    # one batched blur for all five moments
    m = _blur(torch.cat([a, b, a * a, b * b, a * b], 0), g)
    mu1, mu2 = m[0:1], m[1:2]
    mu1_sq, mu2_sq, mu12 = mu1 * mu1, mu2 * mu2, mu1 * mu2
    s1, s2, s12 = m[2:3] - mu1_sq, m[3:4] - mu2_sq, m[4:5] - mu12
    C1, C2 = 0.01 ** 2, 0.03 ** 2
    v = ((2 * mu12 + C1) * (2 * s12 + C2)) / ((mu1_sq + mu2_sq + C1) * (s1 + s2 + C2))
    return v.mean()


def psnr(img1, img2) -> float:
    mse = float(((torch.as_tensor(img1) - torch.as_tensor(img2)) ** 2).mean())
    return float("inf") if mse == 0 else -10.0 * math.log10(mse)


def supervision_target(target, mask=None, background=(0.0, 0.0, 0.0)):
    """Foreground from ``target``, background color everywhere outside the mask."""
    if mask is None:
        return target
    m = mask.to(target.dtype)
    if m.dim() == 2:
        m = m[..., None]
    bg = torch.as_tensor(np.asarray(background, dtype=np.float64), dtype=target.dtype)
    return target * m + bg * (1 - m)


def loss_photometric(rendered, target, mask=None, lam: float = 0.2, background=(0.0, 0.0, 0.0)):
    """``(1 - lam) * L1 + lam * (1 - SSIM) / 2`` against the masked target."""
    if rendered.shape != target.shape:
        raise DimensionMismatch(f"{tuple(rendered.shape)} vs {tuple(target.shape)}")
    if mask is not None and tuple(mask.shape[:2]) != tuple(target.shape[:2]):
        raise DimensionMismatch("mask size differs from image size")
    tgt = supervision_target(target, mask, background)
    l1 = (rendered - tgt).abs().mean()
    if lam == 0:
        return l1
    return (1 - lam) * l1 + lam * (1 - ssim(rendered, tgt)) / 2


def loss_distortion(distortion: torch.Tensor):
    return distortion.mean()


def depth_normals(depth: torch.Tensor, rays: torch.Tensor, origin: torch.Tensor):
    """World normals from a depth map by central differences; ``(H-2, W-2, 3)``."""
    P = origin + depth[..., None] * rays
    dx = P[1:-1, 2:] - P[1:-1, :-2]
    dy = P[2:, 1:-1] - P[:-2, 1:-1]
    n = torch.cross(dx, dy, dim=-1)
    n = n / n.norm(dim=-1, keepdim=True).clamp_min(1e-20)
    facing = torch.sign((n * rays[1:-1, 1:-1]).sum(-1, keepdim=True)).detach()
    return -facing * n


def loss_normal(normal: torch.Tensor, depth: torch.Tensor, alpha: torch.Tensor,
                rays: torch.Tensor, origin: torch.Tensor, min_alpha: float = 0.5):
    """Mean ``1 - <blended normal, depth normal>`` over interior foreground pixels."""
    a = alpha.detach() > min_alpha
    valid = a[1:-1, 1:-1] & a[1:-1, 2:] & a[1:-1, :-2] & a[2:, 1:-1] & a[:-2, 1:-1]
    if not bool(valid.any()):
        return normal.sum() * 0.0
    N = depth_normals(depth, rays, origin)
    err = 1.0 - (normal[1:-1, 1:-1] * N).sum(-1)
    return err[valid].mean()


def _safe_norm(x):
    sq = (x * x).sum(-1)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def loss_isotropic(log_scale: torch.Tensor, index=None, scale_ratio: float = 0.4):
    """Mean ``|min(s)/max(s) - scale_ratio|`` over the selected surfels."""
    if index is not None:
        log_scale = log_scale[torch.as_tensor(np.asarray(index, dtype=np.int64))]
    if log_scale.shape[0] == 0:
        return log_scale.sum() * 0.0
    s = torch.exp(log_scale)
    ratio = s.min(dim=-1).values / s.max(dim=-1).values
    return (ratio - scale_ratio).abs().mean()


def loss_rigging(local_xyz, local_log_scale, eps_p: float = 1.0, eps_s: float = 0.6):
    """Hinge penalties keeping hand surfels near, and no larger than, their triangle."""
    if local_xyz.shape[0] == 0:
        z = local_xyz.sum() * 0.0
        return z, z
    lp = _safe_norm(torch.relu(local_xyz.abs() - eps_p)).mean()
    ls = _safe_norm(torch.relu(torch.exp(local_log_scale) - eps_s)).mean()
    return lp, ls


def total_loss(components, weights: LossWeights = LossWeights()):
    """Weighted sum of (photometric, distortion, normal, position, scale, isotropic)."""
    c = list(components)
    if len(c) != 6:
        raise ValueError("expected six loss components")
    for v in c:
        if not math.isfinite(float(v.detach() if torch.is_tensor(v) else v)):
            raise NonFinite("loss component is not finite")
    lam = (1.0, weights.distortion, weights.normal, weights.position, weights.scale,
           weights.isotropic)
    total = 0.0
    for w, v in zip(lam, c):
        total = total + w * v
    return total
