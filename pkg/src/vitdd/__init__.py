"""Dual-modality vision transformer for driver distraction detection, on numpy."""

from .model import ModelConfig, ViTDDParams, forward, init_params, multitask_loss
from .tensor import Tensor, backward, no_grad
from .training import TrainConfig, fit, lr_at

__version__ = "0.1.0"

__all__ = [
    "ModelConfig", "ViTDDParams", "forward", "init_params", "multitask_loss",
    "Tensor", "backward", "no_grad", "TrainConfig", "fit", "lr_at",
]
