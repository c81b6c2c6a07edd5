"""On-disk scene bundles and the small image/mesh formats they use.

Layout under a bundle root::

    manifest.json                     grid of image/mask paths, hands, metadata
    cameras.json                      one pinhole camera per view
    images/<view>/<frame:05>.ppm      binary P6, 8-bit
    masks/<view>/<frame:05>.pgm       binary P5, 8-bit, 255 = foreground
    template/<hand>/topology.obj      ``v``/``f`` lines only (1-based faces)
    template/<hand>/frames.bin        per frame: uint32 vertex count, then float32 xyz (LE)
    object/seed.ply                   ASCII PLY, x y z [red green blue]

Frame and view indices are zero-based everywhere.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Camera
from .model import TemplateSequence

SCHEMA_VERSION = 1


class BundleError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(p for _, p in self.problems))


class MissingFile(BundleError):
    pass


class ParseError(BundleError):
    pass


class GridIncomplete(BundleError):
    pass


class TopologyOutOfRange(BundleError):
    pass


# --------------------------------------------------------------------------
# small formats


def write_ppm(path, rgb):
    """Write an RGB image (uint8, or float in [0, 1]) as binary P6."""
    img = np.asarray(rgb)
    if img.dtype != np.uint8:
        img = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(img[..., :3]).tobytes())


def write_pgm(path, gray, maxval: int = 255):
    """Write a grayscale image as binary P5; 16-bit samples are big-endian per the format."""
    img = np.asarray(gray)
    h, w = img.shape[:2]
    dt = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n%d\n" % (w, h, maxval))
        f.write(np.ascontiguousarray(img.astype(dt)).tobytes())


def _read_netpbm(path, magic: bytes):
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated header")
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != magic:
        raise ValueError(f"expected {magic!r}, got {tokens[0]!r}")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    ch = 3 if magic == b"P6" else 1
    dt = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    n = w * h * ch * dt.itemsize
    if len(data) - pos < n:
        raise ValueError("truncated pixel data")
    img = np.frombuffer(data, dtype=dt, count=w * h * ch, offset=pos)
    return img.reshape((h, w, ch) if ch == 3 else (h, w)), maxval


def read_ppm(path) -> np.ndarray:
    return _read_netpbm(path, b"P6")[0].astype(np.uint8)


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(path, b"P5")[0]


def write_obj(path, vertices, faces):
    with open(path, "w") as f:
        for v in np.asarray(vertices, dtype=np.float64):
            f.write("v %r %r %r\n" % tuple(float(c) for c in v))
        for tri in np.asarray(faces, dtype=np.int64):
            f.write("f %d %d %d\n" % tuple(int(i) + 1 for i in tri))


def read_obj(path):
    verts, faces = [], []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                verts.append([float(c) for c in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(c.split("/")[0]) - 1 for c in parts[1:4]])
    return np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def write_frames_bin(path, vertices):
    v = np.asarray(vertices, dtype="<f4")
    with open(path, "wb") as f:
        for frame in v:
            f.write(struct.pack("<I", frame.shape[0]))
            f.write(np.ascontiguousarray(frame).tobytes())


def read_frames_bin(path) -> np.ndarray:
    data = Path(path).read_bytes()
    frames, pos = [], 0
    while pos < len(data):
        if len(data) - pos < 4:
            raise ValueError("truncated length prefix")
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        size = n * 12
        if len(data) - pos < size:
            raise ValueError("truncated vertex buffer")
        frames.append(np.frombuffer(data, dtype="<f4", count=n * 3, offset=pos).reshape(n, 3))
        pos += size
    if frames and len({f.shape[0] for f in frames}) != 1:
        raise ValueError("vertex count changes between frames")
    return np.stack(frames).astype(np.float64) if frames else np.zeros((0, 0, 3))


def write_ply(path, points, colors=None):
    p = np.asarray(points, dtype=np.float64)
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\nelement vertex %d\n" % len(p))
        f.write("property double x\nproperty double y\nproperty double z\n")
        if colors is not None:
            f.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        f.write("end_header\n")
        c = None if colors is None else np.asarray(colors, dtype=np.uint8)
        for i, pt in enumerate(p):
            row = "%r %r %r" % tuple(float(x) for x in pt)
            if c is not None:
                row += " %d %d %d" % tuple(int(x) for x in c[i])
            f.write(row + "\n")


def read_ply(path):
    with open(path) as f:
        if f.readline().strip() != "ply":
            raise ValueError("not a PLY file")
        n, props = 0, []
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "format" and parts[1] != "ascii":
                raise ValueError("only ASCII PLY is supported")
            if parts[0] == "element" and parts[1] == "vertex":
                n = int(parts[2])
            elif parts[0] == "property":
                props.append(parts[-1])
            elif parts[0] == "end_header":
                break
        rows = [f.readline().split() for _ in range(n)]
    if any(len(r) != len(props) for r in rows):
        raise ValueError("PLY row width does not match header")
    arr = np.array(rows, dtype=np.float64).reshape(n, len(props))
    pts = arr[:, [props.index(a) for a in "xyz"]]
    colors = None
    if all(c in props for c in ("red", "green", "blue")):
        colors = arr[:, [props.index(c) for c in ("red", "green", "blue")]].astype(np.uint8)
    return pts, colors


# --------------------------------------------------------------------------
# bundle


@dataclass
class SceneBundle:
    cameras: list
    images: np.ndarray  # (N, T, H, W, 3) uint8
    masks: np.ndarray  # (N, T, H, W) bool
    templates: dict  # hand name -> TemplateSequence
    object_points: np.ndarray  # (M, 3)
    object_colors: np.ndarray | None = None  # (M, 3) uint8
    metadata: dict = field(default_factory=dict)

    @property
    def n_views(self):
        return self.images.shape[0]

    @property
    def n_frames(self):
        return self.images.shape[1]

    def image(self, view: int, frame: int) -> np.ndarray:
        return self.images[view, frame].astype(np.float64) / 255.0

    def save(self, root):
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        N, T = self.n_views, self.n_frames
        grid_img, grid_mask = [], []
        for v in range(N):
            (root / "images" / f"{v}").mkdir(parents=True, exist_ok=True)
            (root / "masks" / f"{v}").mkdir(parents=True, exist_ok=True)
            ri, rm = [], []
            for t in range(T):
                pi = f"images/{v}/{t:05d}.ppm"
                pm = f"masks/{v}/{t:05d}.pgm"
                write_ppm(root / pi, self.images[v, t])
                write_pgm(root / pm, self.masks[v, t].astype(np.uint8) * 255)
                ri.append(pi)
                rm.append(pm)
            grid_img.append(ri)
            grid_mask.append(rm)
        templates = {}
        for hand, tmpl in sorted(self.templates.items()):
            d = root / "template" / hand
            d.mkdir(parents=True, exist_ok=True)
            write_obj(d / "topology.obj", np.asarray(tmpl.vertices[0], dtype=np.float32), tmpl.faces)
            write_frames_bin(d / "frames.bin", tmpl.vertices)
            templates[hand] = {"topology": f"template/{hand}/topology.obj",
                               "frames": f"template/{hand}/frames.bin"}
        (root / "object").mkdir(exist_ok=True)
        write_ply(root / "object" / "seed.ply", self.object_points, self.object_colors)
        _dump_json(root / "cameras.json", [c.to_dict() for c in self.cameras])
        manifest = {
            "schema_version": SCHEMA_VERSION,
            "n_views": N,
            "n_frames": T,
            "cameras": "cameras.json",
            "images": grid_img,
            "masks": grid_mask,
            "templates": templates,
            "object_seed": "object/seed.ply",
            "metadata": self.metadata,
        }
        _dump_json(root / "manifest.json", manifest)
        return root


def _dump_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def load_bundle(root) -> SceneBundle:
    """Load and validate a bundle; raises a BundleError subclass naming every problem."""
    root = Path(root)
    problems = []  # (error class, message)

    def need(rel, what):
        p = root / rel
        if not p.is_file():
            problems.append((MissingFile, f"missing {what}: {rel}"))
            return None
        return p

    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise MissingFile([(MissingFile, f"missing manifest: {mpath}")])
    try:
        manifest = json.loads(mpath.read_text())
        N, T = int(manifest["n_views"]), int(manifest["n_frames"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ParseError([(ParseError, f"manifest.json: {exc}")]) from None

    cameras = []
    cp = need(manifest.get("cameras", "cameras.json"), "cameras")
    if cp is not None:
        try:
            cameras = [Camera.from_dict(d) for d in json.loads(cp.read_text())]
            if len(cameras) != N:
                problems.append((GridIncomplete, f"cameras.json has {len(cameras)} cameras, expected {N}"))
        except (ValueError, KeyError, TypeError) as exc:
            problems.append((ParseError, f"cameras.json: {exc}"))

    images = [[None] * T for _ in range(N)]
    masks = [[None] * T for _ in range(N)]
    for key, store, reader in (("images", images, read_ppm), ("masks", masks, read_pgm)):
        grid = manifest.get(key, [])
        for v in range(N):
            row = grid[v] if v < len(grid) else []
            for t in range(T):
                if t >= len(row) or not row[t]:
                    problems.append((GridIncomplete, f"{key} grid has no entry for (view {v}, frame {t})"))
                    continue
                rel = row[t]
                if not (root / rel).is_file():
                    problems.append((GridIncomplete, f"{key} file for (view {v}, frame {t}) missing: {rel}"))
                    continue
                try:
                    store[v][t] = reader(root / rel)
                except ValueError as exc:
                    problems.append((ParseError, f"{rel}: {exc}"))

    templates = {}
    for hand, ref in sorted(manifest.get("templates", {}).items()):
        tp = need(ref.get("topology", ""), f"{hand} topology")
        fp = need(ref.get("frames", ""), f"{hand} frames")
        if tp is None or fp is None:
            continue
        try:
            verts0, faces = read_obj(tp)
            frames = read_frames_bin(fp)
        except ValueError as exc:
            problems.append((ParseError, f"template {hand}: {exc}"))
            continue
        nv = frames.shape[1] if frames.size else len(verts0)
        bad = (faces < 0) | (faces >= nv)
        if bad.any():
            rows = np.nonzero(bad.any(axis=1))[0]
            problems.append((TopologyOutOfRange,
                             f"{ref['topology']}: faces {rows[:10].tolist()} index beyond {nv} vertices"))
            continue
        if frames.shape[0] != T:
            problems.append((GridIncomplete, f"{ref['frames']}: {frames.shape[0]} frames, expected {T}"))
            continue
        try:
            templates[hand] = TemplateSequence(faces, frames)
        except ValueError as exc:
            problems.append((ParseError, f"{ref['frames']}: {exc}"))

    points, colors = np.zeros((0, 3)), None
    sp = need(manifest.get("object_seed", "object/seed.ply"), "object seed")
    if sp is not None:
        try:
            points, colors = read_ply(sp)
        except ValueError as exc:
            problems.append((ParseError, f"{sp.name}: {exc}"))

    if not problems:
        shapes = {a.shape for row in images for a in row} | {a.shape[:2] + (3,) for row in masks for a in row}
        if len(shapes) != 1:
            problems.append((ParseError, f"images and masks differ in size: {sorted(shapes)}"))
        for v, cam in enumerate(cameras):
            h, w = images[v][0].shape[:2]
            if (cam.height, cam.width) != (h, w):
                problems.append((ParseError, f"camera {v} is {cam.width}x{cam.height}, images are {w}x{h}"))
    if problems:
        raise problems[0][0](problems)

    return SceneBundle(
        cameras=cameras,
        images=np.stack([np.stack(r) for r in images]),
        masks=np.stack([np.stack(r) for r in masks]) > 127,
        templates=templates,
        object_points=points,
        object_colors=colors,
        metadata=manifest.get("metadata", {}),
    )
