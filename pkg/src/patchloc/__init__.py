"""Weakly supervised patch-grid localization on image-level labels.

A small convolutional backbone maps an image to a grid of per-class patch
probabilities, a learned pairwise refinement cleans the grid up, and
piecewise-linear count-threshold losses train both from image labels plus a
handful of box annotations. Everything runs on a self-contained numpy
autodiff tape; datasets are synthetic and fully seeded.
"""

from .backbone import BackboneConfig, BackboneWeights, PatchScores, forward_patch_probs
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .crf import CrfParams, compute_features, crf_refine
from .losses import (Annotation, LossConfig, ThresholdSet, full_loss,
                     stability_report)
from .metrics import (detect_region, evaluate_localization, iou_ior,
                      localization_accuracy, make_folds)
from .synth import SynthConfig, SynthDataset, generate
from .synth import load as load_dataset
from .tensor import Tape, Tensor, constant, parameter
from .thresholds import ThresholdFitConfig, alternate, fit_thresholds
from .train import Trainer, predict_scores

__version__ = "0.1.0"

__all__ = [
    "Annotation", "BackboneConfig", "BackboneWeights", "ConfigError", "CrfParams",
    "LossConfig", "PatchScores", "RunConfig", "SynthConfig", "SynthDataset",
    "Tape", "Tensor", "ThresholdFitConfig", "ThresholdSet", "Trainer",
    "alternate", "compute_features", "constant", "crf_refine", "detect_region",
    "evaluate_localization", "fit_thresholds", "forward_patch_probs", "full_loss",
    "generate", "iou_ior", "load_checkpoint", "load_config", "load_dataset",
    "localization_accuracy", "make_folds", "parameter", "predict_scores",
    "save_checkpoint", "stability_report",
]
