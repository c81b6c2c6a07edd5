"""Adaptive density control: clone, split and prune surfels between iterations.

Hand children inherit the parent's triangle binding; all new rows start with
zero Adam moments.
"""
from __future__ import annotations

import logging
import math

import numpy as np
import torch

from ..geometry import quat_to_rotmat
from ..model import SurfelSet
from .config import TrainConfig

log = logging.getLogger(__name__)


def _world_max_scale(state, key, surfels: SurfelSet) -> np.ndarray:
    s = np.exp(surfels.log_scale.detach().numpy().max(axis=1))
    if key.startswith("hand/"):
        s = s * state.hands[key.split("/")[1]].triangle_scale()
    return s


def _tangent_samples(surfels: SurfelSet, idx, rng, scale_mult=1.0):
    """Offsets drawn from each surfel's own 2D Gaussian, in the surfel's parent frame."""
    if len(idx) == 0:
        return np.zeros((0, 3))
    R = quat_to_rotmat(surfels.rot.detach().numpy()[idx])
    s = np.exp(surfels.log_scale.detach().numpy()[idx]) * scale_mult
    z = rng.normal(size=(len(idx), 2)) * s
    return R[:, :, 0] * z[:, :1] + R[:, :, 1] * z[:, 1:2]


def _swap(state, key, new: SurfelSet, keep_index):
    keep = torch.as_tensor(np.asarray(keep_index, dtype=np.int64))
    for f in SurfelSet.FIELDS:
        t = getattr(new, f).detach().clone().requires_grad_(True)
        setattr(new, f, t)
        state.optimizer.replace(f"{key}/{f}", t, keep)
    state.set_surfels(key, new)
    # accumulators follow the same row mapping; new rows start empty
    for acc in (state.grad_accum, state.grad_count):
        if key in acc:
            fresh = np.zeros(len(new))
            fresh[:len(keep_index)] = acc[key][np.asarray(keep_index, dtype=np.int64)]
            acc[key] = fresh


def _select_rows(state, key, rows):
    rows = np.asarray(rows, dtype=np.int64)
    s = dict(state.surfel_sets())[key]
    _swap(state, key, s.detach().index(torch.as_tensor(rows)), rows)
    if key.startswith("hand/"):
        hand = state.hands[key.split("/")[1]]
        hand.triangle_ids = hand.triangle_ids[rows]


def densify(state, config: TrainConfig, rng: np.random.Generator) -> dict:
    """Clone small and split large surfels whose mean screen gradient exceeds the threshold."""
    stats = {"cloned": 0, "split": 0}
    total = state.n_surfels()
    budget = config.max_surfels - total
    for key, surfels in list(state.surfel_sets()):
        cnt = state.grad_count[key]
        mean = np.where(cnt > 0, state.grad_accum[key] / np.maximum(cnt, 1), 0.0)
        cand = np.nonzero(mean > config.densify_grad_threshold)[0]
        if len(cand) == 0 or budget <= 0:
            continue
        cand = cand[np.argsort(-mean[cand], kind="stable")][:budget]
        budget -= len(cand)
        big = _world_max_scale(state, key, surfels)[cand] > config.percent_dense * state.scene_extent
        split, clone = np.sort(cand[big]), np.sort(cand[~big])
        s = surfels.detach()
        n = len(s)
        keep = np.setdiff1d(np.arange(n), split)
        parts = [s.index(torch.as_tensor(keep))]
        tri_parts = []
        is_hand = key.startswith("hand/")
        if is_hand:
            hand = state.hands[key.split("/")[1]]
            tri_parts.append(hand.triangle_ids[keep])
        if len(clone):
            c = s.index(torch.as_tensor(clone))
            if is_hand:
                c.xyz = c.xyz + torch.from_numpy(_tangent_samples(s, clone, rng, 0.1))
                tri_parts.append(hand.triangle_ids[clone])
            parts.append(c)
        if len(split):
            shrink = math.log(config.split_factor)
            for _ in range(2):
                c = s.index(torch.as_tensor(split))
                c.xyz = c.xyz + torch.from_numpy(_tangent_samples(s, split, rng))
                c.log_scale = c.log_scale - shrink
                parts.append(c)
                if is_hand:
                    tri_parts.append(hand.triangle_ids[split])
        _swap(state, key, SurfelSet.cat(parts), keep)
        if is_hand:
            hand.triangle_ids = np.concatenate(tri_parts)
        stats["cloned"] += len(clone)
        stats["split"] += len(split)
    return stats


def prune(state, config: TrainConfig) -> int:
    """Drop surfels with opacity below the threshold. Returns the number removed."""
    removed = 0
    for key, surfels in list(state.surfel_sets()):
        op = torch.sigmoid(surfels.opacity_logit.detach()).numpy()
        keep = np.nonzero(op >= config.prune_opacity)[0]
        if len(keep) < len(op):
            removed += len(op) - len(keep)
            _select_rows(state, key, keep)
    return removed


def density_control(state, config: TrainConfig, rng: np.random.Generator) -> dict:
    stats = densify(state, config, rng)
    stats["pruned"] = prune(state, config)
    state.reset_accumulators()
    log.debug("density control at %d: %s", state.iteration, stats)
    return stats
