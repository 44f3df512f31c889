"""Volumetric classification networks with verified gradients and heatmap
explanations: tensors, layers, residual self-attention architectures,
training, Grad-CAM, metrics, volume I/O, and an sklearn-style estimator."""

from .architectures import (ArchitectureSpec, Model, StageSpec, build,
                            build_from_checkpoint, build_named,
                            copy_matching_params, load_checkpoint, make_spec,
                            save_checkpoint)
from .estimator import VolumeNetClassifier
from .gradcam import GradCamResult, compute_gradcam, export_heatmap, peak_region
from .metrics import ConfusionCounts, acc_sen_spe, auc, confusion
from .training import Adam, TrainConfig, TrainReport, evaluate, lr_at, train

__version__ = "0.1.0"

__all__ = [
    "Adam", "ArchitectureSpec", "ConfusionCounts", "GradCamResult", "Model",
    "StageSpec", "TrainConfig", "TrainReport", "VolumeNetClassifier",
    "acc_sen_spe", "auc", "build", "build_from_checkpoint", "build_named",
    "compute_gradcam", "confusion", "copy_matching_params", "evaluate",
    "export_heatmap", "lr_at", "load_checkpoint", "make_spec", "peak_region",
    "save_checkpoint", "train",
]
