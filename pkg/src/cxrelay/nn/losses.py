"""Categorical cross-entropy over one-hot two-class targets."""

from __future__ import annotations

import numpy as np

from .layers import ShapeError

EPS = 1e-7


def categorical_crossentropy(pred: np.ndarray, onehot: np.ndarray) -> float:
    """Mean over the batch of -sum(y * log(p)), p clamped to [EPS, 1-EPS]."""
    if pred.shape != onehot.shape:
        raise ShapeError(f"pred {pred.shape} vs targets {onehot.shape}")
    p = np.clip(pred, EPS, 1.0 - EPS)
    return float(-(onehot * np.log(p)).sum(axis=1).mean())


def crossentropy_grad(pred: np.ndarray, onehot: np.ndarray) -> np.ndarray:
    """d(loss)/d(pred); zero where the clamp is active."""
    if pred.shape != onehot.shape:
        raise ShapeError(f"pred {pred.shape} vs targets {onehot.shape}")
    n = pred.shape[0]
    p = np.clip(pred, EPS, 1.0 - EPS)
    grad = -onehot / p / n
    grad[(pred < EPS) | (pred > 1.0 - EPS)] = 0.0
    return grad


def one_hot(labels: np.ndarray, classes: int = 2, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1.0
    return out
