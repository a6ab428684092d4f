"""Minimal deterministic deep-learning core."""

from .layers import (
    BatchNorm,
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    LayerSpec,
    MaxPool2D,
    ReLU,
    Softmax,
)
from .model import Model, cross_entropy, forward, forward_with_activations, loss_and_grad, predict
from .presets import PRESETS, build_preset
from .train import Interleave, OptimizerConfig, TrainingTrace, train

__all__ = [
    "BatchNorm", "Conv2D", "Dense", "Dropout", "Flatten", "LayerSpec", "MaxPool2D", "ReLU", "Softmax",
    "Model", "cross_entropy", "forward", "forward_with_activations", "loss_and_grad", "predict",
    "PRESETS", "build_preset",
    "Interleave", "OptimizerConfig", "TrainingTrace", "train",
]
