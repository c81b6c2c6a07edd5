"""Finite-difference suites for every analytic gradient in the pipeline.

Each suite compares analytic gradients with central differences (float64,
``h = 1e-5``) and reports, per parameter class, the max-norm relative error
``max|analytic - fd| / max(max|fd|, 1e-8)``.
"""
from __future__ import annotations

import math
import time

import numpy as np
import torch

from .geometry import Camera, quat_multiply
from .model import HandModel, RefinementNet, TemplateSequence, refine, t_normalized
from .optim import losses as L
from .raster import render, render_backward
from .raster.autograd import RenderContext, rasterize
from .synth import NonFinite, fd_gradient

H_STEP = 1e-5
TOLERANCE = 1e-4
PARAMS = ("position", "rotation", "log_scale", "opacity_logit", "color")


def rel_error(analytic, fd) -> float:
    analytic, fd = np.asarray(analytic), np.asarray(fd)
    return float(np.abs(analytic - fd).max() / max(np.abs(fd).max(), 1e-8))


def _tilted_quats(rng, n, max_tilt):
    """Random quaternions whose normal is within ``max_tilt`` of the camera axis."""
    axis = rng.normal(size=(n, 3))
    axis[:, 2] = 0.0
    axis /= np.linalg.norm(axis, axis=-1, keepdims=True)
    tilt = rng.uniform(0.0, max_tilt, size=n)
    spin = rng.uniform(0.0, 2 * math.pi, size=n)
    q_tilt = np.concatenate([np.cos(tilt / 2)[:, None], np.sin(tilt / 2)[:, None] * axis], -1)
    q_spin = np.stack([np.cos(spin / 2), np.zeros(n), np.zeros(n), np.sin(spin / 2)], -1)
    q = quat_multiply(q_tilt, q_spin)
    # unnormalized on purpose: the normalization is part of the chain
    return q * rng.uniform(0.5, 2.0, size=(n, 1))


def random_scene(rng: np.random.Generator, n: int | None = None, width: int = 24, height: int = 20):
    """A small surfel scene in front of a camera at the origin looking down +z.

    Blending jumps where two surfels swap order and where the filter and plane
    branches switch depth, so surfels sit in separate depth layers (shuffled
    against index order), large ones are nearly camera-facing and tiny ones
    stay below half a pixel (filter branch throughout). Opacity stays below
    the alpha clamp.
    """
    n = int(rng.integers(3, 21)) if n is None else n
    cam = Camera.look_at([0.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0], 40.0, 40.0, width, height)
    z = 0.8 * 1.2 ** rng.permutation(n)
    means = np.stack([rng.normal(scale=0.07, size=n) * z, rng.normal(scale=0.06, size=n) * z, z], -1)
    quats = _tilted_quats(rng, n, math.radians(10.0))
    tiny = rng.uniform(size=n) < 0.3
    size = np.where(tiny[:, None], rng.uniform(0.002, 0.006, size=(n, 2)),
                    rng.uniform(0.04, 0.12, size=(n, 2)))
    ls = np.log(size * z[:, None])
    ol = rng.uniform(-2.0, 1.0, size=n)
    cols = rng.uniform(size=(n, 3))
    return cam, [means, quats, ls, ol, cols]


def random_tangled_scene(rng: np.random.Generator, n: int = 5, width: int = 24, height: int = 20):
    """Unrestricted scene: arbitrary orientations, interpenetrating surfels."""
    cam = Camera.look_at([0.0, 0.0, -1.0], [0.0, 0.0, 0.0], [0.0, -1.0, 0.0], 40.0, 40.0, width, height)
    means = rng.normal(scale=0.08, size=(n, 3))
    quats = rng.normal(size=(n, 4))
    ls = np.log(rng.uniform(0.04, 0.12, size=(n, 2)))
    ol = rng.uniform(-2.0, 1.5, size=n)
    cols = rng.uniform(size=(n, 3))
    return cam, [means, quats, ls, ol, cols]


def _signature(out) -> np.ndarray:
    """Contributor count per pixel and touched count per surfel."""
    return np.concatenate([out.n_contrib.ravel(), out.touched.ravel()])


def _fd_params(f, args, h):
    """Central differences of ``f(*args) -> (value, signature)`` for every argument.

    Also reports whether every stencil stayed on the smooth piece of the base
    point, i.e. produced the same signature at ``x - h`` and ``x + h``.
    """
    _, base = f(*args)
    smooth = True
    grads = []
    for i, a in enumerate(args):
        flat = np.array(a, dtype=np.float64).reshape(-1)
        g = np.zeros_like(flat)
        for j in range(flat.size):
            vals = []
            for step in (h, -h):
                x = flat.copy()
                x[j] += step
                cur = list(args)
                cur[i] = x.reshape(np.shape(a))
                v, sig = f(*cur)
                if not math.isfinite(v):
                    raise NonFinite(f"non-finite value at argument {i}, index {j}")
                smooth = smooth and (sig is None or np.array_equal(sig, base))
                vals.append(v)
            g[j] = (vals[0] - vals[1]) / (2 * h)
        grads.append(g.reshape(np.shape(a)))
    return grads, smooth


def _smooth_draws(draw, max_draws: int = 50):
    """Call ``draw()`` until its stencils stay on one smooth piece; returns (result, redraws)."""
    for k in range(max_draws):
        result, smooth = draw()
        if smooth:
            return result, k
    raise RuntimeError(f"no smooth scene in {max_draws} draws")


def _render_scalar(cam, bg, cot):
    gc, ga, gd, gn, gdi = cot

    def f(means, quats, ls, ol, cols):
        o = render(means, quats, ls, ol, cols, cam, bg)
        v = ((o.color * gc).sum() + (o.alpha * ga).sum() + (o.depth * gd).sum()
             + (o.normal * gn).sum() + (o.distortion * gdi).sum())
        return float(v), _signature(o)

    return f


def check_render(rng, h: float = H_STEP, scene=random_scene):
    """All five render outputs, contracted with random cotangents.

    Returns ``(report, redraws)``; see :func:`run_all` for the redraw rule.
    """
    def draw():
        cam, args = scene(rng)
        bg = rng.uniform(size=3)
        H, W = cam.height, cam.width
        cot = (rng.normal(size=(H, W, 3)), rng.normal(size=(H, W)), rng.normal(size=(H, W)),
               rng.normal(size=(H, W, 3)), rng.normal(size=(H, W)))
        gb = render_backward(*args, cam, *cot, background=bg)
        fd, smooth = _fd_params(_render_scalar(cam, bg, cot), args, h)
        return {name: rel_error(getattr(gb, name), g) for name, g in zip(PARAMS, fd)}, smooth

    return _smooth_draws(draw)


def _torch_loss_check(loss_fn, args, h, signature=None):
    """Autograd of ``loss_fn(*tensors)`` against central differences."""
    ts = [torch.tensor(a, dtype=torch.float64, requires_grad=True) for a in args]
    loss_fn(*ts).backward()
    analytic = [t.grad.numpy() for t in ts]

    def f(*a):
        with torch.no_grad():
            v = float(loss_fn(*(torch.as_tensor(x) for x in a)))
        return v, None if signature is None else signature()

    fd, smooth = _fd_params(f, args, h)
    return analytic, fd, smooth


def _render_loss(kind, cam, target, mask, bg):
    rays = torch.from_numpy(cam.pixel_rays())
    origin = torch.from_numpy(cam.center)
    rctx = RenderContext(cam, bg)

    def fn(means, quats, ls, ol, cols):
        out = rasterize(means, quats, ls, ol, cols, rctx)
        if kind == "color":
            return L.loss_photometric(out["color"], target, mask, 0.2, bg)
        if kind == "distortion":
            return L.loss_distortion(out["distortion"])
        return L.loss_normal(out["normal"], out["depth"], out["alpha"], rays, origin, min_alpha=0.3)

    def signature():
        out = rctx.forward
        sig = _signature(out)
        if kind == "color":
            # the L1 term has a kink wherever a pixel crosses its target
            sig = np.concatenate([sig, np.sign(out.color - target.numpy()).ravel().astype(np.int64)])
        return sig

    return fn, signature


def check_render_losses(rng, h: float = H_STEP, width: int = 16, height: int = 14):
    """Photometric, distortion and normal losses end to end through the rasterizer."""
    def draw():
        cam, args = random_scene(rng, width=width, height=height)
        # pull surfels together so the normal loss sees interior foreground pixels
        args[0][:, :2] *= 0.5
        bg = tuple(rng.uniform(size=3))
        target = torch.from_numpy(rng.uniform(size=(cam.height, cam.width, 3)))
        mask = torch.from_numpy(rng.uniform(size=(cam.height, cam.width)) > 0.3)
        report = {}
        for kind in ("color", "distortion", "normal"):
            fn, sig = _render_loss(kind, cam, target, mask, bg)
            an, fd, smooth = _torch_loss_check(fn, args, h, sig)
            if not smooth:
                return None, False
            for name, a, g in zip(PARAMS, an, fd):
                report[f"L_{kind}/{name}"] = rel_error(a, g)
        return report, True

    return _smooth_draws(draw)


def check_rig_losses(rng, h: float = H_STEP) -> dict:
    n = int(rng.integers(3, 21))
    xyz = rng.normal(scale=1.2, size=(n, 3))
    ls = rng.normal(scale=0.6, size=(n, 2)) - 0.5
    an, fd, _ = _torch_loss_check(lambda x, s: sum(L.loss_rigging(x, s, 1.0, 0.6)), [xyz, ls], h)
    report = {"L_p+L_s/xyz": rel_error(an[0], fd[0]), "L_p+L_s/log_scale": rel_error(an[1], fd[1])}
    idx = np.sort(rng.choice(n, size=max(1, n // 2), replace=False))
    an, fd, _ = _torch_loss_check(lambda s: L.loss_isotropic(s, idx, 0.4), [ls], h)
    report["L_i/log_scale"] = rel_error(an[0], fd[0])
    return report, 0


def _tiny_template(rng, n_frames=3):
    v = rng.normal(scale=0.05, size=(n_frames, 4, 3))
    faces = np.array([[0, 1, 2], [0, 2, 3], [1, 3, 2]])
    return TemplateSequence(faces, v)


def check_refinement(rng, h: float = H_STEP) -> dict:
    """Net weights through refinement; local attributes through rigging.

    The net sees stop-gradient copies of its inputs, so local attributes are
    checked on the rigged (unrefined) surfels, where that path is absent.
    """
    tmpl = _tiny_template(rng)
    hand = HandModel.initialize("right", tmpl, k=2, v=0.3, rng=rng)
    net = RefinementNet(depth=3, width=8, L_x=2, L_r=1, L_s=1, L_j=1, seed=int(rng.integers(1 << 30)))
    with torch.no_grad():
        for p in net.parameters():
            p.normal_(0.0, 0.3, generator=torch.Generator().manual_seed(int(rng.integers(1 << 30))))
    t = int(rng.integers(tmpl.n_frames))
    w_pos = torch.from_numpy(rng.normal(size=(len(hand.local), 3)))
    w_rot = torch.from_numpy(rng.normal(size=(len(hand.local), 4)))
    w_ls = torch.from_numpy(rng.normal(size=(len(hand.local), 2)))

    def objective(use_net):
        out = hand.world(t)
        if use_net:
            out, _ = refine(out, t_normalized(t, tmpl.n_frames), net)
        rot = out.rot / out.rot.norm(dim=-1, keepdim=True)
        return (out.xyz * w_pos).sum() + (rot * w_rot).sum() + (out.log_scale * w_ls).sum()

    params = dict(net.named_parameters())
    params["local/xyz"] = hand.local.xyz.requires_grad_(True)
    params["local/rot"] = hand.local.rot.requires_grad_(True)
    params["local/log_scale"] = hand.local.log_scale.requires_grad_(True)
    objective(True).backward()
    analytic = {name: p.grad.numpy().copy() for name, p in params.items() if not name.startswith("local/")}
    for name, p in params.items():
        p.grad = None
    objective(False).backward()
    report = {}
    for name, p in params.items():
        use_net = not name.startswith("local/")
        an = analytic[name] if use_net else p.grad.numpy().copy()
        base = p.detach().clone()

        def f(x, p=p, base=base):
            with torch.no_grad():
                p.copy_(torch.from_numpy(x))
                v = float(objective(use_net))
                p.copy_(base)
            return v

        fd = fd_gradient(f, base.numpy().copy(), h)
        key = f"net/{name}" if not name.startswith("local/") else name
        report[key] = rel_error(an, fd)
    return report, 0


SUITES = {
    "render": check_render,
    "render_losses": check_render_losses,
    "rig_losses": check_rig_losses,
    "refinement": check_refinement,
}


def run_all(n_scenes: int = 20, seed: int = 0, suites=None, h: float = H_STEP) -> dict:
    """Run every suite on ``n_scenes`` random scenes; returns the max error per key.

    Depth-sorted blending with a hard 3-sigma cutoff is only piecewise smooth,
    and a central difference across a jump measures the jump, not the
    derivative. A render-based scene is therefore redrawn when any stencil
    changes the contributor count of a pixel, the pixel count of a surfel or,
    for the photometric loss, the sign of any color residual;
    redraws are counted in the report. Accepted scenes are checked on every
    coordinate.
    """
    rng = np.random.default_rng(seed)
    t0 = time.time()
    worst = {}
    redraws = {}
    for name in suites or SUITES:
        fn = SUITES[name]
        redraws[name] = 0
        for _ in range(n_scenes):
            report, k = fn(rng, h)
            redraws[name] += k
            for key, err in report.items():
                kk = f"{name}:{key}"
                worst[kk] = max(worst.get(kk, 0.0), err)
    ok = all(math.isfinite(v) and v < TOLERANCE for v in worst.values())
    return {"max_rel_error": worst, "tolerance": TOLERANCE, "h": h, "n_scenes": n_scenes,
            "redraws": redraws, "passed": ok, "seconds": time.time() - t0}
