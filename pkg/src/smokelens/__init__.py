"""smokelens: transmission-guided, uncertainty-aware smoke segmentation at desk scale."""

from .imagecore import GrayMap, ImageRGB, avg_pool_same, binary_entropy, min_filter
from .losses import (
    CoherenceConfig,
    LossWeights,
    calibrated_entropy_loss,
    kl_standard_normal,
    structure_loss,
    total_generator_loss,
    transmission_coherence_loss,
    uncertainty_consistency_loss,
)
from .metrics import ReliabilityReport, ece, f_measure, mmse
from .synthdata import LabeledScene, SceneSpec, generate, read_dataset, write_dataset
from .toynet import SmokeModel, TrainConfig, load_checkpoint, mc_sample, predict, train
from .transmission import TransmissionConfig, estimate_transmission
from .uncertainty import SampleSet, UncertaintyMaps, decompose, mean_prediction

__version__ = "0.1.0"

__all__ = [
    "GrayMap",
    "ImageRGB",
    "avg_pool_same",
    "binary_entropy",
    "min_filter",
    "CoherenceConfig",
    "LossWeights",
    "calibrated_entropy_loss",
    "kl_standard_normal",
    "structure_loss",
    "total_generator_loss",
    "transmission_coherence_loss",
    "uncertainty_consistency_loss",
    "ReliabilityReport",
    "ece",
    "f_measure",
    "mmse",
    "LabeledScene",
    "SceneSpec",
    "generate",
    "read_dataset",
    "write_dataset",
    "SmokeModel",
    "TrainConfig",
    "load_checkpoint",
    "mc_sample",
    "predict",
    "train",
    "TransmissionConfig",
    "estimate_transmission",
    "SampleSet",
    "UncertaintyMaps",
    "decompose",
    "mean_prediction",
    "__version__",
]
