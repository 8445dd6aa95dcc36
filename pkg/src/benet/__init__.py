"""Bias-expansion face-forgery detector with latent-space attention."""

from .detector import DetectorState, bias_statistic, calibrate_threshold
from .losses import LossBreakdown, LossConfig, total_loss
from .model import BENet, ForwardBundle, LatentPyramid, ModelConfig, compute_bias, lsa_patch_attention

__version__ = "0.1.0"

__all__ = [
    "BENet",
    "DetectorState",
    "ForwardBundle",
    "LatentPyramid",
    "LossBreakdown",
    "LossConfig",
    "ModelConfig",
    "bias_statistic",
    "calibrate_threshold",
    "compute_bias",
    "lsa_patch_attention",
    "total_loss",
]
