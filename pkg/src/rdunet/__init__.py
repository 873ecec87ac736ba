"""Residual log-dense U-Net for sea-land segmentation on a float64 autodiff engine."""

from .engine import ShapeError, Tape, Tensor, grad_check
from .network import NetworkConfig, build_network, forward, predict_mask
from .training import TrainingConfig, train

__version__ = "0.1.0"

__all__ = [
    "ShapeError", "Tape", "Tensor", "grad_check",
    "NetworkConfig", "build_network", "forward", "predict_mask",
    "TrainingConfig", "train",
]
