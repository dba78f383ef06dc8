"""Adam with decoupled weight decay and a warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional

import numpy as np

from .tensor import NumericError, Tensor


def default_no_decay(name: str, param: Tensor) -> bool:
    """Biases, normalization parameters and mask tokens (all 1-D) skip decay."""
    return param.ndim < 2


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], state: AdamState, lr: float, weight_decay: float = 0.0,
              grads: Optional[Mapping[str, np.ndarray]] = None,
              no_decay: Callable[[str, Tensor], bool] = default_no_decay,
              lr_scale: Optional[Mapping[str, float]] = None,
              clip_grad: Optional[float] = None) -> Optional[float]:
    """Apply one bias-corrected Adam update in place.

    Gradients default to each parameter's ``.grad``; parameters without a
    gradient are left alone. The whole step is aborted with
    :class:`NumericError` before any parameter changes if a gradient is not
    finite. Returns the global gradient norm when clipping is enabled.
    """
    if grads is None:
        grads = {k: p.grad for k, p in params.items() if p.grad is not None}
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    norm = None
    factor = 1.0
    if clip_grad is not None:
        norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
        if norm > clip_grad:
            factor = clip_grad / (norm + 1e-6)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in grads.items():
        p = params[name]
        dt = p.data.dtype.type
        if factor != 1.0:
            g = g * dt(factor)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= dt(b1)
        m += dt(1.0 - b1) * g
        v *= dt(b2)
        v += dt(1.0 - b2) * (g * g)
        step_lr = lr * (lr_scale.get(name, 1.0) if lr_scale else 1.0)
        if weight_decay and not no_decay(name, p):
            p.data *= dt(1.0 - step_lr * weight_decay)
        denom = np.sqrt(v / dt(c2)) + dt(state.eps)
        p.data -= dt(step_lr / c1) * m / denom
    return norm


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    warmup_steps: float
    total_steps: int
    floor: float = 0.0


def lr_at(step: float, schedule: LrSchedule) -> float:
    """Linear warmup from 0 to ``base_lr``, then half-cosine down to ``floor``."""
    s = schedule
    if step < s.warmup_steps:
        return s.base_lr * step / s.warmup_steps
    span = s.total_steps - s.warmup_steps
    progress = 1.0 if span <= 0 else min(1.0, (step - s.warmup_steps) / span)
    return s.floor + (s.base_lr - s.floor) * 0.5 * (1.0 + math.cos(math.pi * progress))
