"""scikit-learn style wrapper around the training loop."""
from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .contact import DEFAULT_TAU, contact_metrics
from .optim import TrainConfig, heldout_metrics, load_state, predict_contacts, train
from .optim.trainer import render_numpy

METRICS_SCHEMA_VERSION = 1


class ContactCapture(BaseEstimator):
    """Fit rigged hand surfels and object surfels to a multi-view sequence.

    ``fit`` takes a :class:`~surfelcontact.bundle.SceneBundle`; ``predict``
    returns accumulated per-vertex contact labels for every hand. Settings
    without a dedicated argument go through ``config`` (a dict of
    :class:`TrainConfig` fields); the named arguments win on conflict.

    Example
    -------
    >>> est = ContactCapture(iterations=500, views_holdout=(7,))  # doctest: +SKIP
    >>> est.fit(bundle).score(bundle, gt)  # doctest: +SKIP
    """

    def __init__(self, iterations: int = 5000, seed: int = 0, tau: float = DEFAULT_TAU,
                 views_holdout=(), refine: bool = True, contact_guided: bool = True,
                 image_subsample: int = 1, config: dict | None = None):
        self.iterations = iterations
        self.seed = seed
        self.tau = tau
        self.views_holdout = views_holdout
        self.refine = refine
        self.contact_guided = contact_guided
        self.image_subsample = image_subsample
        self.config = config

    def make_config(self) -> TrainConfig:
        base = dict(self.config or {})
        base.update(iterations=int(self.iterations), seed=int(self.seed), tau=float(self.tau),
                    views_holdout=[int(v) for v in self.views_holdout], refine=bool(self.refine),
                    contact_guided=bool(self.contact_guided),
                    image_subsample=int(self.image_subsample))
        return TrainConfig.from_dict(base)

    def fit(self, X, y=None, log_path=None, resume=None, progress=None):
        """Train on bundle ``X``. ``resume`` is a checkpoint path to continue from."""
        config = self.make_config()
        state = None
        if resume is not None:
            state = load_state(resume, X.templates)
        self.state_, self.log_ = train(X, config, state, log_path=log_path, progress=progress)
        self.n_frames_ = X.n_frames
        self.hands_ = sorted(self.state_.hands)
        return self

    def check_is_fitted(self):
        if not hasattr(self, "state_"):
            raise NotFittedError("ContactCapture is not fitted yet; call fit or load first")

    def predict(self, X=None) -> dict:
        """Accumulated per-vertex contact labels, one boolean array per hand."""
        _, acc = self.predict_contacts()
        return {name: a.vertex_labels[name] for name, a in acc.items()}

    def predict_contacts(self, tau: float | None = None):
        """``(per_frame, accumulated)`` contact maps; see :func:`optim.predict_contacts`."""
        self.check_is_fitted()
        return predict_contacts(self.state_, self.tau if tau is None else tau)

    def render(self, camera, frame: int, background=None):
        self.check_is_fitted()
        if not 0 <= frame < self.n_frames_:
            raise IndexError(f"frame {frame} outside [0, {self.n_frames_})")
        return render_numpy(self.state_, camera, frame, background)

    def evaluate(self, X=None, y=None, views=None) -> dict:
        """Metrics dict: contact mIoU/F1 against ``y`` and PSNR/SSIM on held-out views of ``X``."""
        self.check_is_fitted()
        out = {"schema_version": METRICS_SCHEMA_VERSION, "tau_m": float(self.tau),
               "tau_v_m": float(self.tau) / math.sqrt(3.0), "units": "meters"}
        if y is not None:
            out.update(label_metrics(self.predict(), y.vertex_labels))
        if X is not None:
            out.update(heldout_metrics(self.state_, X, views))
        return out

    def score(self, X, y) -> float:
        """Mean contact IoU over hands against ground truth ``y``."""
        return label_metrics(self.predict(), y.vertex_labels)["miou"]

    def save(self, path):
        self.check_is_fitted()
        self.state_.save(path)

    @classmethod
    def load(cls, path, bundle) -> "ContactCapture":
        """Restore from a checkpoint; ``bundle`` supplies the template sequences."""
        state = load_state(path, bundle.templates)
        cfg = state.config
        est = cls(iterations=cfg.iterations, seed=cfg.seed, tau=cfg.tau,
                  views_holdout=tuple(cfg.views_holdout), refine=cfg.refine,
                  contact_guided=cfg.contact_guided, image_subsample=cfg.image_subsample,
                  config=cfg.to_dict())
        est.state_, est.log_ = state, []
        est.n_frames_ = state.n_frames
        est.hands_ = sorted(state.hands)
        return est


def label_metrics(pred: dict, gt: dict) -> dict:
    """mIoU (mean over hands) and F1 (mean over hands) of per-vertex labels."""
    missing = sorted(set(gt) - set(pred))
    if missing:
        raise KeyError(f"no prediction for hands {missing}")
    per_hand = {}
    for name in sorted(gt):
        iou, f1 = contact_metrics(pred[name], gt[name])
        per_hand[name] = {"iou": iou, "f1": f1, "n_pred": int(np.sum(pred[name])),
                          "n_gt": int(np.sum(gt[name]))}
    if not per_hand:
        return {"miou": None, "f1": None, "per_hand": {}}
    return {"miou": float(np.mean([v["iou"] for v in per_hand.values()])),
            "f1": float(np.mean([v["f1"] for v in per_hand.values()])),
            "per_hand": per_hand}
