"""Momentum (EMA) encoder: schedule, update rule and feature targets."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .exceptions import ConfigError, ContractError
from .model import BatchIndex, BootMAEModel
from .tensor import Tensor

Shadow = Dict[str, np.ndarray]


@dataclass(frozen=True)
class MomentumSchedule:
    """Piecewise-linear momentum over (fractional) epochs.

    Ramps ``start -> mid`` over ``ramp1`` epochs. When ``end`` is set, a
    second ramp reaches ``end`` at epoch ``ramp2``, starting from the point
    where the first ramp finishes.
    """

    start: float = 0.999
    mid: float = 0.9999
    ramp1: float = 100.0
    end: Optional[float] = None
    ramp2: float = 400.0

    @classmethod
    def from_config(cls, cfg: ModelConfig) -> "MomentumSchedule":
        return cls(cfg.momentum_start, cfg.momentum_mid, cfg.momentum_ramp1,
                   cfg.momentum_end, cfg.momentum_ramp2)


def momentum_at(epoch: float, schedule: MomentumSchedule) -> float:
    s = schedule
    if epoch <= 0:
        return s.start
    if epoch < s.ramp1:
        return s.start + (s.mid - s.start) * epoch / s.ramp1
    if s.end is None or epoch >= s.ramp2:
        return s.mid if s.end is None else s.end
    return s.mid + (s.end - s.mid) * (epoch - s.ramp1) / (s.ramp2 - s.ramp1)


def init_shadow(live: Mapping[str, Tensor], prefix: str = "encoder.") -> Shadow:
    """Copy the live parameters whose names start with ``prefix``."""
    return {k: v.data.copy() for k, v in live.items() if k.startswith(prefix)}


def ema_update(shadow: Shadow, live: Mapping[str, Tensor], m: float) -> Shadow:
    """In place ``shadow <- m * shadow + (1 - m) * live``; ``live`` is untouched."""
    missing = set(shadow) - set(live)
    if missing:
        raise ContractError(f"live parameters missing for shadow entries: {sorted(missing)}")
    for name, s in shadow.items():
        v = live[name]
        v = v.data if isinstance(v, Tensor) else np.asarray(v)
        if v.shape != s.shape:
            raise ContractError(f"{name}: shadow shape {s.shape} != live shape {v.shape}")
        s *= s.dtype.type(m)
        s += s.dtype.type(1.0 - m) * v
    return shadow


def as_params(shadow: Mapping[str, np.ndarray]) -> Dict[str, Tensor]:
    return {k: Tensor(v) for k, v in shadow.items()}


def fed_subset(index: BatchIndex, fraction: float, mode: str,
               rng: Optional[np.random.Generator]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Choose what the momentum encoder sees and where the feature loss applies.

    Returns ``(fed, rows, weights)``: the sorted patch indices fed to the
    momentum encoder, the masked indices the feature loss is evaluated on,
    and their loss weights. ``mode="image"`` feeds the visible patches plus
    sampled masked ones, ``fraction * N`` in total; ``mode="masked"`` feeds
    ``fraction * N`` sampled masked patches only. ``fraction == 1`` feeds the
    full image in both modes.
    """
    B, n_v = index.visible.shape
    n_m = index.masked.shape[1]
    N = n_v + n_m
    if fraction >= 1.0:
        fed = np.broadcast_to(np.arange(N), (B, N))
        return fed, index.masked, index.weights
    total = int(round(fraction * N))
    if mode == "image":
        n_rows = min(total - n_v, n_m)
        if n_rows <= 0:
            raise ConfigError(f"feeding {total} of {N} patches leaves no masked targets beside "
                              f"the {n_v} visible ones; raise ema_fraction above {n_v / N:g}")
    elif mode == "masked":
        n_rows = min(total, n_m)
        if n_rows <= 0:
            raise ConfigError(f"ema_fraction {fraction} feeds no masked patches")
    else:
        raise ConfigError(f"unknown ema_fraction_mode {mode!r}")
    if rng is None:
        raise ContractError("partial momentum-encoder input needs an rng")
    pick = np.stack([np.sort(rng.choice(n_m, size=n_rows, replace=False)) for _ in range(B)])
    rows = np.take_along_axis(index.masked, pick, axis=1)
    weights = np.take_along_axis(index.weights, pick, axis=1)
    fed = rows if mode == "masked" else np.sort(np.concatenate([index.visible, rows], axis=1), axis=1)
    return fed, rows, weights


def target_features(model: BootMAEModel, patches: np.ndarray, index: BatchIndex,
                    shadow: Mapping[str, np.ndarray], fraction: float = 1.0, mode: str = "image",
                    rng: Optional[np.random.Generator] = None):
    """Momentum-encoder features for the loss rows, without recording a graph.

    ``shadow`` may be any encoder parameter set (EMA or frozen). Returns
    ``(features [B, K, d], rows [B, K], weights [B, K])``.
    """
    fed, rows, weights = fed_subset(index, fraction, mode, rng)
    inputs = np.take_along_axis(patches, fed[..., None], axis=1).astype(model.dtype, copy=False)
    with T.no_grad():
        z_hat, taps = model.encode(Tensor(inputs), np.ascontiguousarray(fed), as_params(shadow))
    out = z_hat.data if model.cfg.target_norm else taps["high"].data
    pos = np.stack([np.searchsorted(f, r) for f, r in zip(fed, rows)])
    return np.take_along_axis(out, pos[..., None], axis=1), rows, weights
