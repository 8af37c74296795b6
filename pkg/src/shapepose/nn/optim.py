"""Adam with bias correction and a single-cycle cosine-annealed learning rate."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_max: float = 1e-3
    lr_min: float = 1e-6
    period: int = 1000
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def hyperparameters(self) -> dict:
        return {k: getattr(self, k) for k in ("lr", "beta1", "beta2", "eps", "lr_max", "lr_min", "period")}


def cosine_lr(t: int, state: OptimizerState) -> float:
    """lr_min + (lr_max - lr_min) (1 + cos(pi t / period)) / 2, clamped to lr_min past the period."""
    if t < 0:
        raise ValueError(f"step must be >= 0, got {t}")
    if t >= state.period:
        return state.lr_min
    return state.lr_min + 0.5 * (state.lr_max - state.lr_min) * (1.0 + math.cos(math.pi * t / state.period))


def adam_step(state: OptimizerState, params: dict, grads: dict | None = None, lr: float | None = None) -> OptimizerState:
    """One Adam update of ``params`` (name -> Tensor) in place.

    ``grads`` defaults to each tensor's ``.grad`` (missing gradients count as zero).
    ``lr`` defaults to ``state.lr``.
    """
    if grads is None:
        grads = {k: p.grad for k, p in params.items()}
    for k, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {k!r}")
    state.t += 1
    t = state.t
    step = state.lr if lr is None else lr
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {k!r} {p.data.shape}")
        m = state.m.get(k)
        v = state.v.get(k)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[k], state.v[k] = m, v
        p.data = p.data - step * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state
