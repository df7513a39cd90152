"""Training losses with analytic gradients w.r.t. their first argument.

Scalars accumulate in float64 regardless of input dtype so that batch
losses agree with averaged per-sample losses; returned gradients keep
the input dtype. Arrays with a leading batch axis (ndim >= 3) are scored
per sample and averaged.
"""

from __future__ import annotations

import numpy as np

from ..errors import ValidationError
from .layers import sigmoid


def _sample_axes(arr: np.ndarray) -> tuple[int, ...]:
    """Axes reduced per sample: all but axis 0 for batched inputs."""
    if arr.ndim >= 3:
        return tuple(range(1, arr.ndim))
    return tuple(range(arr.ndim))


def mse_loss(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all elements; gradient 2(a-b)/N w.r.t. a."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch {a.shape} vs {b.shape}")
    diff = a.astype(np.float64) - b.astype(np.float64)
    loss = float(np.mean(diff * diff))
    grad = (2.0 / a.size) * diff
    return loss, grad.astype(a.dtype, copy=False)


def dice_loss(
    logits: np.ndarray, target: np.ndarray, eps: float = 1e-5
) -> tuple[float, np.ndarray]:
    """Soft Dice loss on sigmoid probabilities, per sample, averaged."""
    logits, target = np.asarray(logits), np.asarray(target)
    if logits.shape != target.shape:
        raise ValidationError(f"shape mismatch {logits.shape} vs {target.shape}")
    axes = _sample_axes(logits)
    p = sigmoid(logits).astype(np.float64)
    g = target.astype(np.float64)
    inter = (p * g).sum(axis=axes, keepdims=True)
    denom = p.sum(axis=axes, keepdims=True) + g.sum(axis=axes, keepdims=True) + eps
    per_sample = 1.0 - (2.0 * inter + eps) / denom
    loss = float(np.mean(per_sample))
    n_samples = per_sample.size
    # d(loss)/dp = -(2 g denom - (2 inter + eps)) / denom^2, then chain sigmoid
    dp = -(2.0 * g * denom - (2.0 * inter + eps)) / (denom * denom)
    grad = dp * p * (1.0 - p) / n_samples
    return loss, grad.astype(logits.dtype, copy=False)


def bce_loss(logits: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Binary cross-entropy from logits in the numerically stable form."""
    logits, target = np.asarray(logits), np.asarray(target)
    if logits.shape != target.shape:
        raise ValidationError(f"shape mismatch {logits.shape} vs {target.shape}")
    x = logits.astype(np.float64)
    g = target.astype(np.float64)
    elementwise = np.maximum(x, 0.0) - x * g + np.log1p(np.exp(-np.abs(x)))
    loss = float(np.mean(elementwise))
    grad = (sigmoid(x) - g) / x.size
    return loss, grad.astype(logits.dtype, copy=False)
