"""Adam with decoupled weight decay, weight EMA and learning-rate schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class OptimState:
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0
    weight_decay: float = 0.0

    @classmethod
    def for_params(cls, params: list[Tensor], weight_decay: float = 0.0) -> "OptimState":
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params],
                   step=0, weight_decay=weight_decay)


def adam_step(params: list[Tensor], grads: list[np.ndarray | None], state: OptimState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              weight_decay: float | None = None) -> None:
    """One bias-corrected Adam update, in place.

    Weight decay is decoupled: ``theta -= lr * wd * theta`` using the
    pre-update parameter, independent of the gradient moments.
    """
    if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
        raise ValueError("betas must lie in [0, 1)")
    wd = state.weight_decay if weight_decay is None else weight_decay
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        m, v = state.m[i], state.v[i]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if wd:
            update = update + wd * p.data
        p.data -= (lr * update).astype(p.data.dtype, copy=False)


def ema_update(shadow: list[np.ndarray], params: list[np.ndarray], decay: float) -> list[np.ndarray]:
    """``shadow <- decay * shadow + (1 - decay) * params``, in place; returns shadow."""
    if not 0.0 <= decay <= 1.0:
        raise ValueError("decay must lie in [0, 1]")
    for s, p in zip(shadow, params):
        s *= decay
        s += (1.0 - decay) * p
    return shadow


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def warmup_cosine_lr(base_lr: float, step: int, total_steps: int, warmup_steps: int) -> float:
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    return cosine_lr(base_lr, step - warmup_steps, span)
