"""Pixel-regression and feature-prediction losses over masked patches.

Both losses are means over the evaluated masked rows of a per-row mean
squared error (``||target - pred||^2 / width``), scaled by per-row weights.
Batched inputs average the per-image losses.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .masking import MaskPlan
from .tensor import NumericError, Tensor

EPS = 1e-6


@dataclass(frozen=True)
class LossBreakdown:
    L_R: float
    L_P: float
    lam: float
    L: float


def normalize_patches(patches: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Per-patch standardization: zero mean, unit variance up to ``eps``."""
    mean = patches.mean(axis=-1, keepdims=True)
    var = patches.var(axis=-1, keepdims=True)
    return (patches - mean) / np.sqrt(var + eps)


def pixel_target(patches: np.ndarray, plan: MaskPlan, eps: float = EPS) -> np.ndarray:
    """Normalized pixel targets for the masked patches of one image, ``[N_m, P*P*C]``."""
    return normalize_patches(np.asarray(patches)[plan.masked], eps)


def masked_mse(pred: Tensor, target: np.ndarray, index: np.ndarray,
               weights: Optional[np.ndarray] = None) -> Tensor:
    """Weighted mean over ``index`` rows of per-row MSE.

    ``pred`` is ``[.., N, D]``; ``target`` is ``[.., K, D]`` aligned with
    ``index`` (``[.., K]``). The target is a constant: no gradient reaches it.
    Rows of ``pred`` outside ``index`` receive exactly zero gradient.
    """
    index = np.asarray(index)
    K = index.shape[-1]
    if K == 0:
        warnings.warn("loss over an empty masked set is defined as 0", RuntimeWarning, stacklevel=2)
        return T.scale(T.sum(pred), 0.0)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if target.shape != index.shape + pred.shape[-1:]:
        raise ValueError(f"target {target.shape} does not match index {index.shape} and width {pred.shape[-1]}")
    rows = T.gather(pred, index)
    diff = T.sub(rows, target)
    per_row = T.mean(T.mul(diff, diff), axis=-1)
    if weights is not None:
        per_row = T.mul(per_row, np.asarray(weights, dtype=pred.dtype))
    lead = int(np.prod(index.shape[:-1])) if index.ndim > 1 else 1
    return T.scale(T.sum(per_row), 1.0 / (K * lead))


def loss_regression(x_bar: Tensor, target: np.ndarray, plan: MaskPlan) -> Tensor:
    """Pixel loss of one image: ``x_bar`` ``[N, D]``, ``target`` ``[N_m, D]``."""
    return masked_mse(x_bar, target, plan.masked, plan.weights)


def loss_prediction(f_bar: Tensor, features: np.ndarray, plan: MaskPlan) -> Tensor:
    """Feature loss of one image against momentum-encoder features ``[N, d]``."""
    features = features.data if isinstance(features, Tensor) else np.asarray(features)
    return masked_mse(f_bar, features[plan.masked], plan.masked, plan.weights)


def loss_total(L_R, L_P, lam: float = 1.0) -> LossBreakdown:
    """Combine the two terms as ``L_R + lam * L_P``; non-finite values raise."""
    lr, lp = float(_value(L_R)), float(_value(L_P))
    total = lr + lam * lp
    if not all(math.isfinite(v) for v in (lr, lp, total)):
        raise NumericError(f"non-finite loss: L_R={lr}, L_P={lp}")
    return LossBreakdown(lr, lp, float(lam), total)


def _value(x):
    return x.item() if isinstance(x, Tensor) else x
