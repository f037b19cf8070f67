"""Multi-scale CT organ segmentation trainable across partially labeled datasets."""
from .datamodel import (
    ClassMap,
    DatasetDescriptor,
    ScalePyramid,
    SegmentationOutput,
    VolumeSample,
    remap_labels,
    validate_sample,
)
from .estimator import PipoFanSegmenter
from .fusion import AdaptiveFusion, fuse, scale_score
from .losses import LossConfig, dps_loss, softmax_probs, tal_dps_loss, tal_loss
from .network import NetworkConfig, PipoFanNet, build_feature_graph, build_input_pyramid, conv_depth
from .preprocess import PreprocessConfig
from .trainer import TrainConfig, Trainer, lr_at, phase_for, train

__all__ = [
    "AdaptiveFusion",
    "ClassMap",
    "DatasetDescriptor",
    "LossConfig",
    "NetworkConfig",
    "PipoFanNet",
    "PipoFanSegmenter",
    "PreprocessConfig",
    "ScalePyramid",
    "SegmentationOutput",
    "TrainConfig",
    "Trainer",
    "VolumeSample",
    "build_feature_graph",
    "build_input_pyramid",
    "conv_depth",
    "dps_loss",
    "fuse",
    "lr_at",
    "phase_for",
    "remap_labels",
    "scale_score",
    "softmax_probs",
    "tal_dps_loss",
    "tal_loss",
    "train",
    "validate_sample",
]
__version__ = "0.1.0"
