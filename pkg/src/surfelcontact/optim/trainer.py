"""Training loop, held-out evaluation and contact prediction."""
from __future__ import annotations

import csv
import logging
import math

import numpy as np
import torch

from ..contact import (AccumulatedContact, accumulate, instantaneous_contact, label_contact_voxels,
                       project_to_template)
from ..geometry import Camera
from ..model import (HandModel, ObjectModel, RefinementNet, compose_scene, OBJECT_TAG0)
from ..raster.autograd import RenderContext, rasterize
from . import losses as L
from .config import TrainConfig
from .density import density_control, prune
from .state import TrainState

log = logging.getLogger(__name__)

LOG_FIELDS = ["iteration", "view", "frame", "loss", "l_color", "l_distortion", "l_normal",
              "l_position", "l_scale", "l_isotropic", "n_hand", "n_object", "psnr"]


def subsample_camera(cam: Camera, factor: int) -> Camera:
    if factor == 1:
        return cam
    W, H = cam.width // factor, cam.height // factor
    return Camera(cam.fx / factor, cam.fy / factor, (cam.cx + 0.5) / factor - 0.5,
                  (cam.cy + 0.5) / factor - 0.5, W, H, cam.R, cam.t)


def subsample_image(img: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return img
    H, W = img.shape[0] // factor, img.shape[1] // factor
    img = img[:H * factor, :W * factor]
    return img.reshape(H, factor, W, factor, *img.shape[2:]).mean(axis=(1, 3))


def training_views(bundle, config: TrainConfig):
    held = set(config.views_holdout)
    views = [v for v in range(bundle.n_views) if v not in held]
    if not views:
        raise ValueError("every view is held out")
    return views


def init_state(bundle, config: TrainConfig) -> TrainState:
    """Fresh model: rigged hand surfels, seeded object surfels, zero-output refinement net."""
    rng = np.random.default_rng(config.seed)
    views = training_views(bundle, config)
    fg = bundle.masks[views]
    gray = float(bundle.images[views][fg].mean() / 255.0) if fg.any() else 0.5
    hands = {}
    for name in sorted(bundle.templates):
        hands[name] = HandModel.initialize(name, bundle.templates[name], config.surfels_per_triangle,
                                           config.init_variance, gray, config.sh_degree, rng)
    objects = []
    if len(bundle.object_points):
        colors = None if bundle.object_colors is None else bundle.object_colors / 255.0
        objects.append(ObjectModel.from_points(bundle.object_points, bundle.n_frames, colors,
                                               config.sh_degree))
    net = None
    if config.refine and hands:
        net = RefinementNet(config.net_depth, config.net_width, config.L_x, config.L_r,
                            config.L_s, config.L_j, seed=config.seed)
    pts = [bundle.object_points.reshape(-1, 3)]
    for h in hands.values():
        pts.append(h.template.vertices.reshape(-1, 3))
    pts = np.concatenate(pts)
    extent = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0))) if len(pts) else 1.0
    state = TrainState(hands, objects, net, config, bundle.n_frames, extent, rng=rng)
    state.build_optimizer()
    return state


def _hand_local(state):
    xs = [h.local.xyz for h in state.hands.values()]
    ss = [h.local.log_scale for h in state.hands.values()]
    if not xs:
        z = torch.zeros((0, 3), dtype=torch.float64)
        return z, torch.zeros((0, 2), dtype=torch.float64)
    return torch.cat(xs), torch.cat(ss)


def compose(state: TrainState, frame: int):
    net = state.net if state.config.refine else None
    return compose_scene(state.hands, state.objects, frame, net, state.n_frames)


def render_frame(state: TrainState, camera: Camera, frame: int, background=None):
    """Differentiable render of the composed scene; returns (outputs dict, scene, ctx)."""
    bg = state.config.background if background is None else background
    scene = compose(state, frame)
    s = scene.surfels
    rctx = RenderContext(camera, bg)
    out = rasterize(s.xyz, s.rot, s.log_scale, s.opacity_logit, s.rgb(camera.center), rctx)
    return out, scene, rctx


def loss_terms(state: TrainState, out, target, mask, camera: Camera, iteration: int):
    """Color, distortion, normal, position and scale terms plus a zero placeholder for L_i."""
    cfg = state.config
    lc = L.loss_photometric(out["color"], target, mask, cfg.lambda_dssim, cfg.background)
    zero = out["color"].sum() * 0.0
    if iteration >= cfg.geometry_reg_from:
        ld = L.loss_distortion(out["distortion"])
        rays = torch.from_numpy(camera.pixel_rays())
        ln = L.loss_normal(out["normal"], out["depth"], out["alpha"], rays,
                           torch.from_numpy(camera.center))
    else:
        ld, ln = zero, zero
    lp, ls = L.loss_rigging(*_hand_local(state), cfg.eps_position, cfg.eps_scale)
    li = zero
    return lc, ld, ln, lp, ls, li


def weights(cfg: TrainConfig) -> L.LossWeights:
    return L.LossWeights(cfg.lambda_dssim, cfg.lambda_distortion, cfg.lambda_normal,
                         cfg.lambda_position, cfg.lambda_scale, cfg.lambda_isotropic,
                         cfg.scale_ratio)


class _ContactCache:
    """Contact-voxel membership per frame, refreshed every ``every`` iterations."""

    def __init__(self, every: int, entries: dict):
        self.every = every
        self.entries = entries  # frame -> (iteration, surfel count, members); lives on the state

    def get(self, frame, iteration, scene, tau):
        hit = self.entries.get(frame)
        n = len(scene.tags)
        if hit is None or iteration - hit[0] >= self.every or hit[1] != n:
            pos = scene.surfels.xyz.detach().numpy()
            _, _, members = label_contact_voxels(pos, scene.tags, tau, OBJECT_TAG0)
            hit = (iteration, n, members)
            self.entries[frame] = hit
        return hit[2]

    def clear(self):
        self.entries.clear()


def train(bundle, config: TrainConfig, state: TrainState | None = None, log_path=None,
          progress=None):
    """Optimize until ``config.iterations``; returns ``(state, log rows)``.

    Passing a restored ``state`` resumes from its iteration counter.
    """
    if state is None:
        state = init_state(bundle, config)
    else:
        state.config = config
        if state.optimizer is None:
            state.build_optimizer()
    if state.rng is None:
        state.rng = np.random.default_rng(config.seed)
    rng = state.rng
    views = training_views(bundle, config)
    f = config.image_subsample
    cams = [subsample_camera(c, f) for c in bundle.cameras]
    w = weights(config)
    until = int(config.densify_until_frac * config.iterations)
    cache = _ContactCache(config.contact_refresh, state.contact_cache)
    rows = []
    writer, fh = None, None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
    opt = state.optimizer
    base_lrs = state.learning_rates()
    try:
        while state.iteration < config.iterations:
            it = state.iteration + 1
            view = int(views[rng.integers(len(views))])
            frame = int(rng.integers(bundle.n_frames))
            cam = cams[view]
            target = torch.from_numpy(subsample_image(bundle.image(view, frame), f))
            mask = torch.from_numpy(subsample_image(bundle.masks[view, frame].astype(np.float64), f) > 0.5)

            out, scene, rctx = render_frame(state, cam, frame)
            lc, ld, ln, lp, ls, _ = loss_terms(state, out, target, mask, cam, it)
            li = lc * 0.0
            if config.contact_guided and config.lambda_isotropic > 0:
                members = cache.get(frame, it, scene, config.tau)
                li = L.loss_isotropic(scene.surfels.log_scale, members, config.scale_ratio)
            comps = (lc, ld, ln, lp, ls, li)
            total = L.total_loss(comps, w)
            params = opt.params
            decay = config.position_lr_final ** (min(it, config.iterations) / max(config.iterations, 1))
            for k, base in base_lrs.items():
                opt.lrs[k] = base * decay if k.endswith("/xyz") else base
            for p in params.values():
                p.grad = None
            total.backward()
            opt.step({k: p.grad for k, p in params.items()})

            if rctx.grads is not None:
                start = 0
                for key, s in state.surfel_sets():
                    n = len(s)
                    gb = rctx.grads
                    state.grad_accum[key] += np.where(gb.visible[start:start + n], gb.screen[start:start + n], 0.0)
                    state.grad_count[key] += gb.visible[start:start + n]
                    start += n
            state.iteration = it

            if (config.densify_from <= it <= until and it % config.densify_interval == 0):
                density_control(state, config, rng)
                cache.clear()

            with torch.no_grad():
                p = L.psnr(out["color"], L.supervision_target(target, mask, config.background))
            counts = state.counts()
            row = {
                "iteration": it, "view": view, "frame": frame, "loss": total.item(),
                "l_color": lc.item(), "l_distortion": ld.item(), "l_normal": ln.item(),
                "l_position": lp.item(), "l_scale": ls.item(), "l_isotropic": li.item(),
                "n_hand": sum(v for k, v in counts.items() if k.startswith("hand/")),
                "n_object": sum(v for k, v in counts.items() if k.startswith("object/")),
                "psnr": p,
            }
            if not math.isfinite(row["loss"]):
                raise FloatingPointError(f"non-finite loss at iteration {it}")
            if it % config.log_every == 0:
                rows.append(row)
                if writer is not None:
                    writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
            if progress is not None:
                progress(row)
        if config.iterations > 0:
            prune(state, config)
    finally:
        if fh is not None:
            fh.close()
    return state, rows


# --------------------------------------------------------------------------
# evaluation


@torch.no_grad()
def render_numpy(state: TrainState, camera: Camera, frame: int, background=None):
    from ..raster import render

    bg = state.config.background if background is None else background
    scene = compose(state, frame)
    s = scene.surfels
    rgb = s.rgb(camera.center)
    return render(s.xyz.numpy(), s.rot.numpy(), s.log_scale.numpy(), s.opacity_logit.numpy(),
                  rgb.numpy(), camera, bg)


@torch.no_grad()
def heldout_metrics(state: TrainState, bundle, views=None) -> dict:
    """Mean PSNR/SSIM over every frame of the given (default: held-out) views."""
    views = state.config.views_holdout if views is None else views
    ps, ss = [], []
    for v in views:
        for t in range(bundle.n_frames):
            out = render_numpy(state, bundle.cameras[v], t)
            pred = torch.from_numpy(np.clip(out.color, 0.0, 1.0))
            gt = torch.from_numpy(bundle.image(v, t))
            ps.append(L.psnr(pred, gt))
            ss.append(float(L.ssim(pred, gt)))
    if not ps:
        return {"psnr": None, "ssim": None, "views": []}
    return {"psnr": float(np.mean(ps)), "ssim": float(np.mean(ss)), "views": list(views)}


@torch.no_grad()
def predict_contacts(state: TrainState, tau: float | None = None):
    """Per-frame contact maps and accumulated per-vertex labels for every hand."""
    tau = state.config.tau if tau is None else tau
    per_frame = {name: [] for name in state.hands}
    for t in range(state.n_frames):
        scene = compose(state, t)
        pos = scene.surfels.xyz.numpy()
        obj = pos[scene.tags >= OBJECT_TAG0]
        for name, sl in scene.hand_offsets.items():
            per_frame[name].append(instantaneous_contact(pos[sl], obj, tau))
    accumulated = {}
    for name, maps in per_frame.items():
        acc: AccumulatedContact = accumulate(maps)
        hand = state.hands[name]
        nv = hand.template.vertices.shape[1]
        acc.vertex_labels[name] = project_to_template(acc.ever_contact, hand.triangle_ids,
                                                      hand.template.faces, nv)
        accumulated[name] = acc
    return per_frame, accumulated
