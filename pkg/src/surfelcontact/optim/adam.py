from __future__ import annotations

import logging

import torch

log = logging.getLogger(__name__)


class ShapeMismatch(ValueError):
    pass


class Adam:
    """Adam over named tensors with per-name learning rates.

    Parameters can be swapped for resized tensors (densification) through
    :meth:`replace`, which carries moments over by index and zero-fills the rest.
    """

    def __init__(self, params: dict, lrs: dict, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.lrs = dict(lrs)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.v = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.step_count = 0
        self.skipped = 0

    def step(self, grads: dict) -> bool:
        """One update. Returns False (and leaves everything untouched) on a non-finite gradient."""
        for k, g in grads.items():
            if k not in self.params:
                raise KeyError(k)
            if g is not None and g.shape != self.params[k].shape:
                raise ShapeMismatch(f"{k}: grad {tuple(g.shape)} vs param {tuple(self.params[k].shape)}")
        for k, g in grads.items():
            if g is not None and not torch.isfinite(g).all():
                self.skipped += 1
                log.warning("non-finite gradient for %s; step skipped", k)
                return False
        self.step_count += 1
        t = self.step_count
        bc1 = 1 - self.beta1 ** t
        bc2 = 1 - self.beta2 ** t
        with torch.no_grad():
            for k, p in self.params.items():
                g = grads.get(k)
                if g is None:
                    g = torch.zeros_like(p)
                m, v = self.m[k], self.v[k]
                m.mul_(self.beta1).add_(g, alpha=1 - self.beta1)
                v.mul_(self.beta2).addcmul_(g, g, value=1 - self.beta2)
                lr = self.lrs.get(k, 0.0)
                if lr == 0.0:
                    continue
                p.sub_(lr * (m / bc1) / ((v / bc2).sqrt() + self.eps))
        return True

    def replace(self, name: str, new_param: torch.Tensor, keep_index=None):
        """Swap in ``new_param``; rows ``keep_index`` of the old moments map to its first rows."""
        old_m, old_v = self.m[name], self.v[name]
        m = torch.zeros_like(new_param)
        v = torch.zeros_like(new_param)
        if keep_index is not None:
            n = len(keep_index)
            m[:n] = old_m[keep_index]
            v[:n] = old_v[keep_index]
        self.params[name] = new_param
        self.m[name], self.v[name] = m, v
