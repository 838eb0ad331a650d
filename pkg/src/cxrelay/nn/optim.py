"""SGD-with-momentum and Adam weight updates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class TrainingDivergedError(Exception):
    """Loss or gradients went non-finite."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history


def _check_finite(grads):
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError("non-finite gradient")


@dataclass
class SgdState:
    momentum: float = 0.9
    velocity: list = field(default_factory=list)


def step_sgd(weights: list[np.ndarray], grads: list[np.ndarray],
             lr: float, state: SgdState | None = None) -> list[np.ndarray]:
    """w <- w - lr * v with v = momentum * v + g; plain SGD when momentum=0
    or no state is carried."""
    _check_finite(grads)
    if state is None or state.momentum == 0.0:
        return [w - lr * g for w, g in zip(weights, grads)]
    if not state.velocity:
        state.velocity = [np.zeros_like(w) for w in weights]
    out = []
    for i, (w, g) in enumerate(zip(weights, grads)):
        state.velocity[i] = state.momentum * state.velocity[i] + g
        out.append(w - lr * state.velocity[i])
    return out


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def step_adam(weights: list[np.ndarray], grads: list[np.ndarray],
              lr: float, state: AdamState) -> list[np.ndarray]:
    """Standard bias-corrected Adam update."""
    _check_finite(grads)
    if not state.m:
        state.m = [np.zeros_like(w) for w in weights]
        state.v = [np.zeros_like(w) for w in weights]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    out = []
    for i, (w, g) in enumerate(zip(weights, grads)):
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * (g * g)
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        out.append(w - lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return out
