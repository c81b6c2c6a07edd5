"""Losses, optimizer, density control and the training loop."""
from .adam import Adam, ShapeMismatch
from .config import TrainConfig
from .density import densify, density_control, prune
from .losses import (DimensionMismatch, LossWeights, NonFinite, loss_distortion, loss_isotropic,
                     loss_normal, loss_photometric, loss_rigging, psnr, ssim, total_loss)
from .state import TrainState, load_state, read_checkpoint
from .trainer import heldout_metrics, init_state, predict_contacts, train

__all__ = [
    "Adam", "ShapeMismatch", "TrainConfig", "densify", "density_control", "prune",
    "DimensionMismatch", "LossWeights", "NonFinite", "loss_distortion", "loss_isotropic",
    "loss_normal", "loss_photometric", "loss_rigging", "psnr", "ssim", "total_loss",
    "TrainState", "load_state", "read_checkpoint", "heldout_metrics", "init_state",
    "predict_contacts", "train",
]
