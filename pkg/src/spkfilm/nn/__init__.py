"""Minimal numpy network kernel with exact backpropagation."""

from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import GradCheckResult, check_layer, check_model, finite_diff_check, rel_error, relu_pattern
from .kernels import BACKEND
from .layers import (
    BatchNorm2d,
    Conv2d,
    GlobalAvgPool,
    Linear,
    Module,
    ReLU,
    log_softmax,
    softmax_cross_entropy,
)
from .optim import SGD, OptimState, sgd_momentum_step

__all__ = [
    "BACKEND",
    "BatchNorm2d",
    "Conv2d",
    "GlobalAvgPool",
    "Linear",
    "Module",
    "OptimState",
    "ReLU",
    "SGD",
    "GradCheckResult",
    "check_layer",
    "check_model",
    "relu_pattern",
    "finite_diff_check",
    "load_checkpoint",
    "log_softmax",
    "rel_error",
    "save_checkpoint",
    "sgd_momentum_step",
    "softmax_cross_entropy",
]
