"""Minimal differentiable kernel set: layers, losses, AdamW."""

from .layers import (
    GELU,
    MLP,
    Attention,
    Conv2d,
    Layer,
    LayerNorm,
    Linear,
    ReLU,
    Residual,
    SelfAttention,
    Sequential,
    Sigmoid,
    Softmax,
    TransformerBlock,
    TransposeConv2d,
    set_nan_check,
)
from .losses import bce_loss, dice_loss, mse_loss
from .optim import AdamW

__all__ = [
    "Layer",
    "Linear",
    "Conv2d",
    "TransposeConv2d",
    "LayerNorm",
    "GELU",
    "ReLU",
    "Sigmoid",
    "Softmax",
    "Attention",
    "SelfAttention",
    "Sequential",
    "Residual",
    "MLP",
    "TransformerBlock",
    "set_nan_check",
    "mse_loss",
    "dice_loss",
    "bce_loss",
    "AdamW",
]
