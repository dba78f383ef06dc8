"""Encoder, pixel regressor and feature predictor with feature injection."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np

from . import nn
from . import tensor as T
from .config import ModelConfig
from .exceptions import ContractError
from .masking import MaskPlan, patchify, stack_plans
from .nn import Params
from .tensor import Tensor


@dataclass
class ForwardArtifacts:
    z_hat: Tensor     # normalized encoder output, N_v rows
    shallow: Tensor   # tap injected into the regressor (or the low tap when unused)
    deep: Tensor      # tap injected into the predictor (or the high tap when unused)
    x_bar: Tensor     # N pixel predictions
    f_bar: Tensor     # N feature predictions


@dataclass
class BatchIndex:
    """Stacked visible / masked indices for a batch of plans."""

    masked: np.ndarray    # [B, N_m]
    visible: np.ndarray   # [B, N_v]
    weights: np.ndarray   # [B, N_m]

    @classmethod
    def from_plans(cls, plans: Sequence[MaskPlan]) -> "BatchIndex":
        return cls(*stack_plans(plans))

    @property
    def restore(self) -> np.ndarray:
        """Permutation taking ``[visible, masked]`` order back to grid order."""
        return np.argsort(np.concatenate([self.visible, self.masked], axis=1), axis=1, kind="stable")


def tap_index(level: str, depth: int) -> int:
    """Encoder block whose output serves as the ``low``/``mid``/``high`` tap."""
    if level == "low":
        return 0
    if level == "mid":
        return max(0, depth // 2 - 1)
    if level == "high":
        return depth - 1
    raise ValueError(f"no encoder tap for level {level!r}")


def assemble(visible_tokens: Tensor, mask_token: Tensor, index: BatchIndex, pos: np.ndarray) -> Tensor:
    """Decoder input in grid order: visible tokens and mask tokens plus positions."""
    B, n_m = index.masked.shape
    d = mask_token.shape[-1]
    fill = T.add(np.zeros((B, n_m, d), dtype=mask_token.dtype), mask_token)
    seq = T.gather(T.concat([visible_tokens, fill], axis=1), index.restore)
    return seq + pos.astype(seq.dtype)


def init_params(cfg: ModelConfig, rng: Union[np.random.Generator, int, None] = None,
                dtype=np.float32) -> Params:
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    p: Params = {}
    d = cfg.enc_dim
    nn.init_linear(p, "encoder.patch", cfg.patch_dim, d, rng, dtype)
    for i in range(cfg.enc_depth):
        nn.init_block(p, f"encoder.blocks.{i}", d, rng, dtype, cfg.mlp_ratio)
    nn.init_norm(p, "encoder.norm", d, dtype)

    cross = dict(query_norm=cfg.cross_query_norm, out_proj=cfg.cross_out_proj)
    r = cfg.reg_dim
    nn.init_linear(p, "regressor.embed", d, r, rng, dtype)
    p["regressor.mask_token"] = Tensor(nn.trunc_normal(rng, (r,), dtype=dtype), True, name="regressor.mask_token")
    for i in range(cfg.reg_depth):
        nn.init_block(p, f"regressor.blocks.{i}", r, rng, dtype, cfg.mlp_ratio,
                      inject_dim=None if cfg.reg_inject == "none" else d, **cross)
    if cfg.head_norm:
        nn.init_norm(p, "regressor.norm", r, dtype)
    nn.init_linear(p, "regressor.head", r, cfg.patch_dim, rng, dtype)

    p["predictor.mask_token"] = Tensor(nn.trunc_normal(rng, (d,), dtype=dtype), True, name="predictor.mask_token")
    for i in range(cfg.pred_depth):
        nn.init_block(p, f"predictor.blocks.{i}", d, rng, dtype, cfg.mlp_ratio,
                      inject_dim=None if cfg.pred_inject == "none" else d, **cross)
    if cfg.head_norm:
        nn.init_norm(p, "predictor.norm", d, dtype)
    nn.init_linear(p, "predictor.head.fc1", d, d, rng, dtype)
    nn.init_linear(p, "predictor.head.fc2", d, d, rng, dtype)
    return p


class BootMAEModel:
    """Parameters plus the forward computations of the four components.

    Parameters
    ----------
    cfg : ModelConfig
    params : dict, optional
        Existing parameter collection; freshly initialized from ``seed``
        when omitted.
    """

    def __init__(self, cfg: ModelConfig, params: Optional[Params] = None, seed=0, dtype=np.float32):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed, dtype)
        self.dtype = next(iter(self.params.values())).dtype
        g = cfg.grid
        self.pos_enc = nn.positional_embedding(g, g, cfg.enc_dim, self.dtype)
        self.pos_reg = nn.positional_embedding(g, g, cfg.reg_dim, self.dtype)
        self.pos_pred = self.pos_enc

    def astype(self, dtype) -> "BootMAEModel":
        params = {k: Tensor(v.data.astype(dtype), v.requires_grad, name=k) for k, v in self.params.items()}
        return BootMAEModel(self.cfg, params)

    def encoder_params(self) -> Params:
        return {k: v for k, v in self.params.items() if k.startswith("encoder.")}

    # components ---------------------------------------------------------

    def encode(self, patches, index: np.ndarray, params: Optional[Params] = None
               ) -> Tuple[Tensor, Dict[str, Tensor]]:
        """Run the encoder on the patches at ``index`` (``[B, K]``).

        ``patches`` must already be restricted to those rows. Returns the
        normalized output and the per-level taps (pre-norm block outputs).
        """
        p = self.params if params is None else params
        cfg = self.cfg
        if patches.shape[:-1] != index.shape:
            raise ContractError(f"encoder got {patches.shape[-2]} tokens for {index.shape[-1]} positions")
        x = nn.patch_embed(patches, p["encoder.patch.w"], p["encoder.patch.b"])
        x = x + self.pos_enc[index]
        outputs = []
        for i in range(cfg.enc_depth):
            x = nn.transformer_block(x, p, f"encoder.blocks.{i}", cfg.enc_heads)
            outputs.append(x)
        taps = {lvl: outputs[tap_index(lvl, cfg.enc_depth)] for lvl in ("low", "mid", "high")}
        return nn.norm(x, p, "encoder.norm"), taps

    def _inject(self, taps: Dict[str, Tensor], level: str) -> Optional[Tensor]:
        if level == "none":
            return None
        feat = taps[level]
        if self.cfg.inject_normed:
            feat = nn.norm(feat, self.params, "encoder.norm")
        return feat

    def _decode(self, prefix: str, tokens: Tensor, inject: Optional[Tensor], index: BatchIndex,
                pos: np.ndarray, depth: int, heads: int) -> Tensor:
        p = self.params
        if tokens.shape[-2] != index.visible.shape[-1]:
            raise ContractError(f"{prefix}: {tokens.shape[-2]} tokens for {index.visible.shape[-1]} visible patches")
        if inject is not None and inject.shape[-2] != index.visible.shape[-1]:
            raise ContractError(f"{prefix}: injected feature has {inject.shape[-2]} tokens, "
                                f"expected N_v={index.visible.shape[-1]}")
        x = assemble(tokens, p[f"{prefix}.mask_token"], index, pos)
        for i in range(depth):
            x = nn.transformer_block(x, p, f"{prefix}.blocks.{i}", heads, inject)
        if f"{prefix}.norm.g" in p:
            x = nn.norm(x, p, f"{prefix}.norm")
        return x

    def regress(self, z_hat: Tensor, inject: Optional[Tensor], index: BatchIndex) -> Tensor:
        cfg = self.cfg
        tokens = nn.linear(z_hat, self.params, "regressor.embed")
        x = self._decode("regressor", tokens, inject, index, self.pos_reg, cfg.reg_depth, cfg.reg_heads)
        return nn.linear(x, self.params, "regressor.head")

    def predict(self, z_hat: Tensor, inject: Optional[Tensor], index: BatchIndex) -> Tensor:
        cfg = self.cfg
        x = self._decode("predictor", z_hat, inject, index, self.pos_pred, cfg.pred_depth, cfg.pred_heads)
        return nn.mlp(x, self.params, "predictor.head")

    # composition --------------------------------------------------------

    def forward_patches(self, patches: np.ndarray, index: BatchIndex) -> ForwardArtifacts:
        """Forward a batch of patchified images ``[B, N, P*P*C]``."""
        visible = np.take_along_axis(patches, index.visible[..., None], axis=1)
        z_hat, taps = self.encode(T.Tensor(visible.astype(self.dtype, copy=False)), index.visible)
        cfg = self.cfg
        shallow = self._inject(taps, cfg.reg_inject) if cfg.reg_inject != "none" else None
        deep = self._inject(taps, cfg.pred_inject) if cfg.pred_inject != "none" else None
        x_bar = self.regress(z_hat, shallow, index)
        f_bar = self.predict(z_hat, deep, index)
        return ForwardArtifacts(z_hat, shallow if shallow is not None else taps["low"],
                                deep if deep is not None else taps["high"], x_bar, f_bar)

    def forward(self, images: np.ndarray, plans: Union[MaskPlan, Sequence[MaskPlan]]) -> ForwardArtifacts:
        """Forward images ``[B, H, W, C]`` (or one ``[H, W, C]`` image) under mask plans."""
        single = isinstance(plans, MaskPlan)
        if single:
            images, plans = images[None], [plans]
        cfg = self.cfg
        if images.shape[1:] != (cfg.img_size, cfg.img_size, cfg.in_chans):
            raise ContractError(f"image extents {images.shape[1:]} do not match the config")
        if len(plans) != images.shape[0]:
            raise ContractError("one mask plan per image is required")
        art = self.forward_patches(patchify(images, cfg.patch_size), BatchIndex.from_plans(plans))
        if single:
            art = ForwardArtifacts(*(T.reshape(t, t.shape[1:]) for t in
                                     (art.z_hat, art.shallow, art.deep, art.x_bar, art.f_bar)))
        return art

    def features(self, images: np.ndarray, params: Optional[Params] = None) -> Tensor:
        """Average-pooled normalized encoder output over all patches (no masking)."""
        patches = patchify(np.asarray(images), self.cfg.patch_size).astype(self.dtype, copy=False)
        B, N = patches.shape[:2]
        index = np.broadcast_to(np.arange(N), (B, N))
        z_hat, _ = self.encode(T.Tensor(patches), index, params)
        return T.mean(z_hat, axis=1)
