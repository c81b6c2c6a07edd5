"""Hand-object contact capture with rigged 2D Gaussian surfels."""
from .bundle import SceneBundle, load_bundle
from .contact import (DEFAULT_TAU, AccumulatedContact, ContactMap, accumulate, contact_metrics,
                      instantaneous_contact, label_contact_voxels, project_to_template)
from .estimator import ContactCapture
from .optim import TrainConfig
from .synth import GroundTruth, SynthSpec, generate

__version__ = "0.1.0"

__all__ = [
    "AccumulatedContact", "ContactCapture", "ContactMap", "DEFAULT_TAU", "GroundTruth",
    "SceneBundle", "SynthSpec", "TrainConfig", "accumulate", "contact_metrics", "generate",
    "instantaneous_contact", "label_contact_voxels", "load_bundle", "project_to_template",
]
