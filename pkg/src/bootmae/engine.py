"""Pretraining loop: mask, forward, losses, backward, Adam step, EMA update."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from . import checkpoint as ckpt
from .config import RunConfig, from_mapping
from .exceptions import CheckpointError, ConfigError
from .masking import make_plan, patchify
from .model import BatchIndex, BootMAEModel
from .momentum import MomentumSchedule, ema_update, init_shadow, momentum_at, target_features
from .objectives import loss_total, masked_mse, normalize_patches
from .optim import AdamState, LrSchedule, adam_step, lr_at

logger = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "epoch", "lr", "momentum", "L_R", "L_P", "L")


@dataclass
class TrainState:
    config: RunConfig
    model: BootMAEModel
    shadow: Dict[str, np.ndarray]
    adam: AdamState
    rng: np.random.Generator
    step: int = 0
    epoch: int = 0
    metrics: List[dict] = field(default_factory=list)
    plan_log: List[str] = field(default_factory=list)   # mask digest per step, not persisted


def init_state(config: RunConfig) -> TrainState:
    """Fresh parameters, EMA shadow copied from the encoder, empty optimizer."""
    seed = config.train.seed
    model = BootMAEModel(config.model, seed=np.random.default_rng([seed, 0]))
    t = config.train
    return TrainState(config, model, init_shadow(model.params),
                      AdamState(t.beta1, t.beta2, t.adam_eps),
                      np.random.default_rng([seed, 1]))


def steps_per_epoch(n_images: int, batch_size: int) -> int:
    return max(1, math.ceil(n_images / batch_size))


def lr_schedule(config: RunConfig, n_images: int) -> LrSchedule:
    t = config.train
    spe = steps_per_epoch(n_images, t.batch_size)
    return LrSchedule(t.resolved_lr(), t.resolved_warmup() * spe, t.epochs * spe, t.min_lr)


def train_step(state: TrainState, images: np.ndarray, lr: float, momentum_epoch: float) -> dict:
    """One optimizer step on a batch; returns its metric row."""
    cfg = state.config.model
    model = state.model
    lo, hi = cfg.block_bounds()
    plans = [make_plan(cfg.mask, cfg.grid, cfg.grid, cfg.mask_ratio, state.rng, lo, hi,
                       cfg.aspect_min, cfg.w_center) for _ in range(len(images))]
    index = BatchIndex.from_plans(plans)
    state.plan_log.append(hashlib.sha1(index.masked.tobytes()).hexdigest()[:12])
    patches = patchify(images, cfg.patch_size)
    pix = normalize_patches(np.take_along_axis(patches, index.masked[..., None], axis=1))
    feats, rows, weights = target_features(model, patches, index, state.shadow,
                                           cfg.ema_fraction, cfg.ema_fraction_mode, state.rng)

    for p in model.params.values():
        p.zero_grad()
    art = model.forward_patches(patches, index)
    l_r = masked_mse(art.x_bar, pix, index.masked, index.weights)
    l_p = masked_mse(art.f_bar, feats, rows, weights)
    breakdown = loss_total(l_r, l_p, cfg.lam)
    total = l_r if cfg.pixel_loss else None
    if cfg.lam:
        total = l_p * cfg.lam if total is None else total + l_p * cfg.lam
    total.backward()
    t = state.config.train
    adam_step(model.params, state.adam, lr, t.weight_decay, clip_grad=t.clip_grad)
    m = momentum_at(momentum_epoch, MomentumSchedule.from_config(cfg))
    ema_update(state.shadow, model.params, m)
    return {"L_R": breakdown.L_R, "L_P": breakdown.L_P,
            "L": breakdown.L_R * cfg.pixel_loss + cfg.lam * breakdown.L_P, "momentum": m}


def pretrain_epoch(images: np.ndarray, state: TrainState) -> List[dict]:
    """Run one epoch over ``images`` ``[n, H, W, C]``; appends and returns metric rows."""
    t = state.config.train
    n = len(images)
    spe = steps_per_epoch(n, t.batch_size)
    schedule = lr_schedule(state.config, n)
    order = state.rng.permutation(n)
    rows = []
    for b in range(spe):
        batch = images[order[b * t.batch_size:(b + 1) * t.batch_size]]
        lr = lr_at(state.step, schedule)
        stats = train_step(state, batch, lr, (state.step + 1) / spe)
        state.step += 1
        row = {"step": state.step, "epoch": state.step / spe, "lr": lr, **stats}
        rows.append({k: row[k] for k in METRIC_FIELDS})
    state.epoch += 1
    state.metrics.extend(rows)
    return rows


def pretrain(images: np.ndarray, state: TrainState, epochs: Optional[int] = None,
             on_epoch: Optional[Callable[[TrainState], None]] = None) -> TrainState:
    """Train until ``state.epoch`` reaches ``epochs`` (default: the configured total)."""
    target = state.config.train.epochs if epochs is None else epochs
    while state.epoch < target:
        rows = pretrain_epoch(images, state)
        logger.info("epoch %d  L=%.4f  L_R=%.4f  L_P=%.4f", state.epoch,
                    rows[-1]["L"], rows[-1]["L_R"], rows[-1]["L_P"])
        if on_epoch is not None:
            on_epoch(state)
    return state


def write_metrics(rows: List[dict], path, fields=METRIC_FIELDS) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(fields), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


# checkpoints ----------------------------------------------------------------

def save_checkpoint(state: TrainState, path) -> None:
    arrays = {f"param/{k}": v.data for k, v in state.model.params.items()}
    arrays.update({f"ema/{k}": v for k, v in state.shadow.items()})
    arrays.update({f"adam_m/{k}": v for k, v in state.adam.m.items()})
    arrays.update({f"adam_v/{k}": v for k, v in state.adam.v.items()})
    header = {
        "kind": "pretrain",
        "config": {k: v for k, v in state.config.to_flat().items()},
        "step": state.step,
        "epoch": state.epoch,
        "adam_step": state.adam.step,
        "rng": state.rng.bit_generator.state,
        "metrics": state.metrics,
    }
    ckpt.write_container(path, header, arrays)


def load_checkpoint(path) -> TrainState:
    header, arrays = ckpt.read_container(path)
    if header.get("kind") != "pretrain":
        raise CheckpointError(f"{path}: not a pretraining checkpoint")
    try:
        config = from_mapping(header["config"])
    except ConfigError as exc:
        raise CheckpointError(f"{path}: stored config invalid: {exc}") from exc
    state = init_state(config)
    params = state.model.params
    expected = {f"param/{k}": v.shape for k, v in params.items()}
    expected.update({f"ema/{k}": v.shape for k, v in state.shadow.items()})
    for prefix in ("adam_m/", "adam_v/"):
        expected.update({n: params[n[len(prefix):]].shape for n in arrays
                         if n.startswith(prefix) and n[len(prefix):] in params})
    ckpt.check_shapes(expected, arrays, path)
    for k, p in params.items():
        p.data = arrays[f"param/{k}"].copy()
    state.shadow = {k: arrays[f"ema/{k}"].copy() for k in state.shadow}
    state.adam.m = {n[7:]: a.copy() for n, a in arrays.items() if n.startswith("adam_m/")}
    state.adam.v = {n[7:]: a.copy() for n, a in arrays.items() if n.startswith("adam_v/")}
    state.adam.step = int(header["adam_step"])
    state.step, state.epoch = int(header["step"]), int(header["epoch"])
    state.rng.bit_generator.state = header["rng"]
    state.metrics = list(header.get("metrics", []))
    return state


def load_encoder(path, expect=None) -> BootMAEModel:
    """Model (full parameter set) from a pretraining checkpoint.

    ``expect`` is an optional :class:`ModelConfig` whose image and patch
    geometry must agree with the stored one.
    """
    state = load_checkpoint(path)
    cfg = state.config.model
    if expect is not None:
        for key in ("img_size", "patch_size", "in_chans", "enc_dim", "enc_depth"):
            if getattr(cfg, key) != getattr(expect, key):
                raise CheckpointError(f"{path}: {key}={getattr(cfg, key)} in checkpoint, "
                                      f"{getattr(expect, key)} requested")
    return state.model
