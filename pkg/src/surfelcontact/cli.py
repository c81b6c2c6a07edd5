"""Command-line entry point: gen-synth, fit, render, contact, eval, gradcheck.

Errors are reported as one JSON object on stderr with a nonzero exit status.
``SURFELCONTACT_THREADS`` sets the torch/numba thread count.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from .bundle import load_bundle, write_pgm, write_ppm
from .contact import DEFAULT_TAU, distance_colormap
from .geometry import Camera
from .optim import TrainConfig
from .synth import SCENE_KINDS, GroundTruth, SynthSpec, generate

EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_GRADCHECK = 3
DEPTH_UNIT_M = 1e-4  # 16-bit depth PGM step


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _dump(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _views(text):
    if text is None or text == "":
        return []
    return [int(v) for v in str(text).split(",") if v.strip()]


def _config(args) -> TrainConfig:
    """Config file (if any) overridden by command-line flags."""
    d = {}
    if getattr(args, "config", None):
        with open(args.config) as f:
            d = json.load(f)
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    if getattr(args, "tau", None) is not None:
        d["tau"] = args.tau
    if getattr(args, "iters", None) is not None:
        d["iterations"] = args.iters
    if getattr(args, "views_holdout", None) is not None:
        d["views_holdout"] = _views(args.views_holdout)
    return TrainConfig.from_dict(d)


def _estimator(cfg: TrainConfig):
    from .estimator import ContactCapture

    return ContactCapture(cfg.iterations, cfg.seed, cfg.tau, tuple(cfg.views_holdout), cfg.refine,
                          cfg.contact_guided, cfg.image_subsample, cfg.to_dict())


def _load_estimator(args):
    from .estimator import ContactCapture

    bundle = load_bundle(args.bundle)
    return ContactCapture.load(args.checkpoint, bundle), bundle


def _camera(args, bundle) -> Camera:
    if getattr(args, "camera", None):
        with open(args.camera) as f:
            return Camera.from_dict(json.load(f))
    if not 0 <= args.view < bundle.n_views:
        raise IndexError(f"view {args.view} outside [0, {bundle.n_views})")
    return bundle.cameras[args.view]


# --------------------------------------------------------------------------
# commands


def cmd_gen_synth(args):
    spec = SynthSpec(kind=args.kind, n_frames=args.frames, n_views=args.views, width=args.size,
                     height=args.size, noise=args.noise, seed=args.seed,
                     tau=DEFAULT_TAU if args.tau is None else args.tau, bulge=args.bulge)
    bundle, gt = generate(spec)
    out = Path(args.out)
    bundle.save(out)
    gt.save(out / "gt_contact.json")
    return {"bundle": str(out), "ground_truth": str(out / "gt_contact.json"),
            "gt_contact_vertices": {h: int(v.sum()) for h, v in gt.vertex_labels.items()}}


def cmd_fit(args):
    cfg = _config(args)
    bundle = load_bundle(args.bundle)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.to_json(out / "config.json")
    est = _estimator(cfg)
    est.fit(bundle, log_path=out / "train_log.csv", resume=args.resume)
    est.save(out / "checkpoint.bin")
    counts = est.state_.counts()
    return {"checkpoint": str(out / "checkpoint.bin"), "log": str(out / "train_log.csv"),
            "iterations": est.state_.iteration, "surfels": counts}


def cmd_render(args):
    est, bundle = _load_estimator(args)
    cam = _camera(args, bundle)
    r = est.render(cam, args.frame)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_ppm(out / "color.ppm", np.round(np.clip(r.color, 0.0, 1.0) * 255.0).astype(np.uint8))
    depth = np.where(r.alpha > 0.5, r.depth, 0.0)
    write_pgm(out / "depth.pgm", np.clip(np.round(depth / DEPTH_UNIT_M), 0, 65535), maxval=65535)
    n = r.normal / np.maximum(np.linalg.norm(r.normal, axis=-1, keepdims=True), 1e-12)
    n = np.where(r.alpha[..., None] > 0.5, n, -1.0)
    write_ppm(out / "normal.ppm", np.round((n + 1.0) * 127.5).astype(np.uint8))
    write_pgm(out / "alpha.pgm", np.round(np.clip(r.alpha, 0.0, 1.0) * 255.0).astype(np.uint8))
    info = {"frame": args.frame, "camera": cam.to_dict(), "depth_unit_m": DEPTH_UNIT_M,
            "units": "meters", "files": ["color.ppm", "depth.pgm", "normal.ppm", "alpha.pgm"]}
    _dump(out / "render.json", info)
    return info


def cmd_contact(args):
    est, bundle = _load_estimator(args)
    tau = est.tau if args.tau is None else args.tau
    per_frame, acc = est.predict_contacts(tau)
    out = Path(args.out)
    cam = bundle.cameras[args.view]
    tau_v = tau / math.sqrt(3.0)
    hands = {}
    for name, maps in per_frame.items():
        for t, m in enumerate(maps):
            _dump(out / "frames" / name / f"{t:05d}.json", {"schema_version": 1, "hand": name,
                                                            "frame": t, **m.to_json()})
        a = acc[name]
        hands[name] = {
            "vertex_labels": a.vertex_labels[name].astype(int).tolist(),
            "ever_contact": a.ever_contact.astype(int).tolist(),
            "min_distance_m": [None if not np.isfinite(d) else float(d) for d in a.min_distance],
            "n_frames": a.n_frames,
        }
        hdir = out / "heatmaps" / name
        hdir.mkdir(parents=True, exist_ok=True)
        for t, m in enumerate(maps):
            img = _heatmap(est, cam, t, name, m.distance, tau)
            write_ppm(hdir / f"{t:05d}.ppm", np.round(img * 255.0).astype(np.uint8))
    doc = {"schema_version": 1, "tau_m": tau, "tau_v_m": tau_v, "units": "meters", "hands": hands}
    _dump(out / "accumulated.json", doc)
    return {"accumulated": str(out / "accumulated.json"),
            "contact_vertices": {h: int(sum(v["vertex_labels"])) for h, v in hands.items()},
            "tau_m": tau}


def _heatmap(est, cam, frame, hand, distance, tau):
    """Hand surfels colored by distance (blue touching, red at tau); object surfels gray."""
    import torch

    from .optim.trainer import compose
    from .raster import render

    with torch.no_grad():
        scene = compose(est.state_, frame)
        s = scene.surfels
        rgb = np.full((len(s), 3), 0.35)
        sl = scene.hand_offsets[hand]
        rgb[sl] = distance_colormap(distance, tau)
        out = render(s.xyz.numpy(), s.rot.numpy(), s.log_scale.numpy(), s.opacity_logit.numpy(),
                     rgb, cam, (0.0, 0.0, 0.0))
    return np.clip(out.color, 0.0, 1.0)


def _labels(path) -> tuple[dict, float | None]:
    with open(path) as f:
        d = json.load(f)
    return ({h: np.asarray(e["vertex_labels"], dtype=bool) for h, e in d["hands"].items()},
            d.get("tau_m"))


def cmd_eval(args):
    from .estimator import METRICS_SCHEMA_VERSION, label_metrics

    pred, tau_p = _labels(args.pred)
    gt, tau_g = _labels(args.gt)
    tau = tau_p if tau_p is not None else tau_g
    m = {"schema_version": METRICS_SCHEMA_VERSION, "units": "meters", "tau_m": tau,
         "tau_v_m": None if tau is None else tau / math.sqrt(3.0), "gt_tau_m": tau_g,
         "psnr": None, "ssim": None, "views": []}
    m.update(label_metrics(pred, gt))
    if args.checkpoint and args.bundle:
        est, bundle = _load_estimator(args)
        views = _views(args.views_holdout) if args.views_holdout is not None else None
        m.update(est.evaluate(bundle, None, views))
        m["tau_m"] = tau
        m["tau_v_m"] = None if tau is None else tau / math.sqrt(3.0)
    if args.out:
        _dump(args.out, m)
    return m


def cmd_gradcheck(args):
    from .gradcheck import run_all

    report = run_all(n_scenes=args.scenes, seed=args.seed)
    if args.out:
        _dump(args.out, report)
    return report


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="surfelcontact", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-synth", help="generate a synthetic bundle and ground truth")
    g.add_argument("--kind", choices=SCENE_KINDS, default="gripper-sphere")
    g.add_argument("--frames", type=int, default=20)
    g.add_argument("--views", type=int, default=8)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--noise", type=float, default=0.0)
    g.add_argument("--bulge", type=float, default=0.0, help="peak link bulge in meters")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tau", type=float, default=None)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_synth)

    f = sub.add_parser("fit", help="train on a bundle")
    f.add_argument("--bundle", required=True)
    f.add_argument("--config")
    f.add_argument("--seed", type=int)
    f.add_argument("--tau", type=float)
    f.add_argument("--iters", type=int)
    f.add_argument("--views-holdout", help="comma list of view indices")
    f.add_argument("--resume", help="checkpoint to continue from")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit)

    r = sub.add_parser("render", help="render color, depth and normal images")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--bundle", required=True)
    r.add_argument("--view", type=int, default=0)
    r.add_argument("--camera", help="camera JSON overriding --view")
    r.add_argument("--frame", type=int, default=0)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    c = sub.add_parser("contact", help="per-frame and accumulated contacts plus heatmaps")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--bundle", required=True)
    c.add_argument("--tau", type=float)
    c.add_argument("--view", type=int, default=0, help="camera for heatmaps")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_contact)

    e = sub.add_parser("eval", help="contact metrics and held-out image metrics")
    e.add_argument("--pred", required=True, help="accumulated contact JSON")
    e.add_argument("--gt", required=True, help="ground-truth contact JSON")
    e.add_argument("--checkpoint")
    e.add_argument("--bundle")
    e.add_argument("--views-holdout")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    k = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--scenes", type=int, default=20)
    k.add_argument("--out")
    k.set_defaults(func=cmd_gradcheck)
    return p


def _set_threads():
    n = os.environ.get("SURFELCONTACT_THREADS")
    if not n:
        return
    import numba
    import torch

    torch.set_num_threads(int(n))
    numba.set_num_threads(min(int(n), numba.config.NUMBA_NUM_THREADS))


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(json.dumps({"error": "UsageError", "message": str(exc)}), file=sys.stderr)
        return EXIT_USAGE
    try:
        _set_threads()
        result = args.func(args)
    except Exception as exc:  # report every failure the same machine-readable way
        print(json.dumps({"error": type(exc).__name__, "message": str(exc),
                          "command": args.command}), file=sys.stderr)
        return EXIT_ERROR
    print(json.dumps(result, indent=2, sort_keys=True, default=_json_default))
    if args.command == "gradcheck" and not result["passed"]:
        return EXIT_GRADCHECK
    return 0


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


if __name__ == "__main__":
    sys.exit(main())
