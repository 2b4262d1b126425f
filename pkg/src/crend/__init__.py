"""Contrastive rendering segmentation of follicles and ovary in 3D ultrasound."""
from .estimator import CRendSegmenter
from .inference import Prediction, predict_volume
from .metrics import aggregate, evaluate
from .phantom import PhantomSpec, generate_dataset, generate_phantom
from .training import FULL_PROFILE, TOY_PROFILE, TrainConfig, fit, load_checkpoint
from .volume import LabelMask, Volume, load_labels, load_volume, save_labels, save_volume

__all__ = [
    "CRendSegmenter",
    "FULL_PROFILE",
    "LabelMask",
    "PhantomSpec",
    "Prediction",
    "TOY_PROFILE",
    "TrainConfig",
    "Volume",
    "aggregate",
    "evaluate",
    "fit",
    "generate_dataset",
    "generate_phantom",
    "load_checkpoint",
    "load_labels",
    "load_volume",
    "predict_volume",
    "save_labels",
    "save_volume",
]
__version__ = "0.1.0"
