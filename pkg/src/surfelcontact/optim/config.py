from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from ..contact import DEFAULT_TAU


def _default_lrs():
    # hand positions are in triangle-local units; object positions are scaled by scene extent
    return {
        "position": 1.6e-4,
        "rotation": 1e-3,
        "log_scale": 5e-3,
        "opacity": 5e-2,
        "color": 2.5e-3,
        "net": 1e-4,
        "pose": 1e-4,
    }


@dataclass
class TrainConfig:
    iterations: int = 5000
    lr: dict = field(default_factory=_default_lrs)
    seed: int = 0
    tau: float = DEFAULT_TAU
    image_subsample: int = 1
    position_lr_final: float = 0.01  # position rates decay exponentially to this fraction
    views_holdout: list = field(default_factory=list)
    background: list = field(default_factory=lambda: [0.0, 0.0, 0.0])

    # initialization
    surfels_per_triangle: int = 5
    init_variance: float = 0.5
    sh_degree: int = 0

    # model switches
    refine: bool = True
    contact_guided: bool = True
    net_depth: int = 4
    net_width: int = 64
    L_x: int = 8
    L_r: int = 4
    L_s: int = 4
    L_j: int = 4

    # losses
    lambda_dssim: float = 0.2
    lambda_distortion: float = 100.0
    lambda_normal: float = 0.005
    lambda_position: float = 0.01
    lambda_scale: float = 1.0
    lambda_isotropic: float = 0.1
    scale_ratio: float = 0.4
    eps_position: float = 1.0
    eps_scale: float = 0.6
    geometry_reg_from: int = 500  # distortion/normal terms start once opacities have settled
    contact_refresh: int = 50

    # density control
    densify_interval: int = 100
    densify_from: int = 500
    densify_until_frac: float = 0.7
    densify_grad_threshold: float = 2e-4
    percent_dense: float = 0.01
    split_factor: float = 1.6
    prune_opacity: float = 0.005
    max_surfels: int = 10000

    log_every: int = 1

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        lr = _default_lrs()
        lr.update(self.lr)
        self.lr = lr
        self.views_holdout = [int(v) for v in self.views_holdout]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)
