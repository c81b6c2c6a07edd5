"""Training state and its binary checkpoint format.

Checkpoint layout (all little-endian)::

    bytes 0-7    magic  b"SFCKPT\\x00\\x00"
    bytes 8-11   uint32 format version (currently 1)
    bytes 12-15  uint32 header length H
    H bytes      UTF-8 JSON header: {"meta": {...}, "arrays": [{"name", "dtype", "shape",
                 "offset", "nbytes"}, ...]}
    padding      zero bytes up to an 8-byte boundary
    data         raw array bytes; each array's ``offset`` counts from the start of data

Array dtypes are ``<f8`` or ``<i8``. Array names follow the optimizer naming:
``hand/<name>/<field>``, ``hand/<name>/triangle_ids``, ``object/<i>/<field>``,
``object/<i>/pose_q``, ``object/<i>/pose_t``, ``net/<parameter>``, and the Adam
moments ``adam/m/<param name>`` / ``adam/v/<param name>``. Densification
accumulators (``accum/<key>``, ``count/<key>``) and the cached contact-voxel
members per frame (``contact/<frame>``) are stored too, so a resumed run
continues exactly.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from ..model import HandModel, ObjectModel, RefinementNet, SurfelSet, TemplateSequence
from .adam import Adam
from .config import TrainConfig

MAGIC = b"SFCKPT\x00\x00"
VERSION = 1


@dataclass
class TrainState:
    hands: dict
    objects: list
    net: RefinementNet | None
    config: TrainConfig
    n_frames: int
    scene_extent: float
    iteration: int = 0
    optimizer: Adam | None = None
    grad_accum: dict = field(default_factory=dict)
    grad_count: dict = field(default_factory=dict)
    rng: np.random.Generator | None = None
    contact_cache: dict = field(default_factory=dict)

    # ---- parameter registry

    def surfel_sets(self):
        """``(key, SurfelSet)`` for every hand (local frame) and object (canonical frame)."""
        for name in sorted(self.hands):
            yield f"hand/{name}", self.hands[name].local
        for i, obj in enumerate(self.objects):
            yield f"object/{i}", obj.canonical

    def set_surfels(self, key: str, surfels: SurfelSet):
        kind, ident = key.split("/")
        if kind == "hand":
            self.hands[ident].local = surfels
        else:
            self.objects[int(ident)].canonical = surfels

    def named_params(self) -> dict:
        out = {}
        for key, s in self.surfel_sets():
            for f in SurfelSet.FIELDS:
                out[f"{key}/{f}"] = getattr(s, f)
        for i, obj in enumerate(self.objects):
            out[f"object/{i}/pose_q"] = obj.pose_q
            out[f"object/{i}/pose_t"] = obj.pose_t
        if self.net is not None:
            for n, p in self.net.named_parameters():
                out[f"net/{n}"] = p
        return out

    def learning_rates(self) -> dict:
        lr = self.config.lr
        table = {"xyz": "position", "rot": "rotation", "log_scale": "log_scale",
                 "opacity_logit": "opacity", "sh": "color", "pose_q": "pose", "pose_t": "pose"}
        out = {}
        for name in self.named_params():
            parts = name.split("/")
            if parts[0] == "net":
                out[name] = lr["net"]
                continue
            rate = lr[table[parts[2]]]
            if parts[2] == "xyz":
                # world-space convention: rate times scene extent; hand positions are in
                # triangle-local units, so divide by the hand's typical triangle scale
                rate *= self.scene_extent
                if parts[0] == "hand":
                    rate /= self.hand_unit(parts[1])
            if parts[2] == "pose_t":
                rate *= self.scene_extent  # translations follow the same world convention
            out[name] = rate
        return out

    def hand_unit(self, name: str) -> float:
        """Median triangle scale of a hand template over its first frame, meters."""
        tmpl = self.hands[name].template
        return float(np.median(tmpl.frames(0).s[tmpl.valid_faces(0)]))

    def enable_grad(self):
        for p in self.named_params().values():
            p.requires_grad_(True)

    def build_optimizer(self):
        self.enable_grad()
        self.optimizer = Adam(self.named_params(), self.learning_rates())
        self.reset_accumulators()

    def reset_accumulators(self):
        for key, s in self.surfel_sets():
            self.grad_accum[key] = np.zeros(len(s))
            self.grad_count[key] = np.zeros(len(s))

    def n_surfels(self) -> int:
        return sum(len(s) for _, s in self.surfel_sets())

    def counts(self) -> dict:
        return {key: len(s) for key, s in self.surfel_sets()}

    # ---- checkpoint

    def arrays(self) -> dict:
        out = {}
        for name, p in self.named_params().items():
            out[name] = p.detach().numpy().astype("<f8")
        for name, hand in sorted(self.hands.items()):
            out[f"hand/{name}/triangle_ids"] = hand.triangle_ids.astype("<i8")
        if self.optimizer is not None:
            for name in self.optimizer.params:
                out[f"adam/m/{name}"] = self.optimizer.m[name].numpy().astype("<f8")
                out[f"adam/v/{name}"] = self.optimizer.v[name].numpy().astype("<f8")
        for key in self.grad_accum:
            out[f"accum/{key}"] = self.grad_accum[key].astype("<f8")
            out[f"count/{key}"] = self.grad_count[key].astype("<f8")
        for frame, (_, _, members) in self.contact_cache.items():
            out[f"contact/{frame}"] = np.asarray(members).astype("<i8")
        return out

    def save(self, path):
        arrays = self.arrays()
        entries, offset = [], 0
        for name in sorted(arrays):
            a = np.ascontiguousarray(arrays[name])
            entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                            "offset": offset, "nbytes": a.nbytes})
            offset += a.nbytes + (-a.nbytes % 8)
        meta = {
            "iteration": self.iteration,
            "n_frames": self.n_frames,
            "scene_extent": self.scene_extent,
            "config": self.config.to_dict(),
            "hands": sorted(self.hands),
            "n_objects": len(self.objects),
            "rng_state": self.rng.bit_generator.state if self.rng is not None else None,
            "adam_step": None if self.optimizer is None else self.optimizer.step_count,
            "contact_cache": {str(f): [int(it), int(n)] for f, (it, n, _) in self.contact_cache.items()},
            "net": None if self.net is None else {"depth": self.config.net_depth,
                                                   "width": self.config.net_width},
        }
        header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True).encode()
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<II", VERSION, len(header)))
            f.write(header)
            f.write(b"\x00" * (-(16 + len(header)) % 8))
            for e in entries:
                a = np.ascontiguousarray(arrays[e["name"]])
                f.write(a.tobytes())
                f.write(b"\x00" * (-a.nbytes % 8))


def read_checkpoint(path):
    """Return ``(meta, arrays)`` from a checkpoint file."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != MAGIC:
        raise ValueError("not a surfel checkpoint")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(data[16:16 + hlen])
    start = 16 + hlen
    start += -start % 8
    arrays = {}
    for e in header["arrays"]:
        a = np.frombuffer(data, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"])),
                          offset=start + e["offset"])
        arrays[e["name"]] = a.reshape(e["shape"]).copy()
    return header["meta"], arrays


def load_state(path, templates: dict) -> TrainState:
    """Rebuild a TrainState from a checkpoint and the bundle's template sequences."""
    meta, arrays = read_checkpoint(path)
    config = TrainConfig.from_dict(meta["config"])

    def surfels(prefix):
        return SurfelSet(*(torch.from_numpy(arrays[f"{prefix}/{f}"]) for f in SurfelSet.FIELDS))

    hands = {}
    for name in meta["hands"]:
        tmpl = templates[name]
        if not isinstance(tmpl, TemplateSequence):
            raise TypeError("templates must map hand names to TemplateSequence")
        hands[name] = HandModel(name, tmpl, surfels(f"hand/{name}"),
                                arrays[f"hand/{name}/triangle_ids"])
    objects = []
    for i in range(meta["n_objects"]):
        objects.append(ObjectModel(surfels(f"object/{i}"), torch.from_numpy(arrays[f"object/{i}/pose_q"]),
                                   torch.from_numpy(arrays[f"object/{i}/pose_t"])))
    net = None
    if meta["net"] is not None:
        net = RefinementNet(config.net_depth, config.net_width, config.L_x, config.L_r,
                            config.L_s, config.L_j)
        with torch.no_grad():
            for n, p in net.named_parameters():
                p.copy_(torch.from_numpy(arrays[f"net/{n}"]))
    rng = np.random.default_rng()
    if meta.get("rng_state"):
        rng.bit_generator.state = meta["rng_state"]
    state = TrainState(hands, objects, net, config, meta["n_frames"], meta["scene_extent"],
                       meta["iteration"], rng=rng)
    if meta.get("adam_step") is not None:
        state.build_optimizer()
        opt = state.optimizer
        for name in opt.params:
            opt.m[name] = torch.from_numpy(arrays[f"adam/m/{name}"])
            opt.v[name] = torch.from_numpy(arrays[f"adam/v/{name}"])
        opt.step_count = meta["adam_step"]
    for key in list(state.grad_accum):
        if f"accum/{key}" in arrays:
            state.grad_accum[key] = arrays[f"accum/{key}"]
            state.grad_count[key] = arrays[f"count/{key}"]
    for f, (it, n) in meta.get("contact_cache", {}).items():
        state.contact_cache[int(f)] = (it, n, arrays[f"contact/{f}"])
    return state
