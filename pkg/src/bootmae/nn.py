"""Vision-transformer building blocks on top of :mod:`bootmae.tensor`.

Parameters live in flat ``dict[str, Tensor]`` collections keyed by dotted
names (``"encoder.blocks.0.attn.q.w"``). Every function here takes the
collection plus a name prefix, which keeps EMA shadows, optimizer moments
and checkpoints trivially name-aligned.
"""

from __future__ import annotations

from typing import Dict, Optional

import numpy as np

from . import tensor as T
from .exceptions import ConfigError, ContractError
from .tensor import Tensor

Params = Dict[str, Tensor]

INIT_STD = 0.02


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD, dtype=np.float32) -> np.ndarray:
    """Normal samples truncated to two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


def _param(params: Params, name: str, value: np.ndarray) -> None:
    params[name] = Tensor(value, requires_grad=True, name=name)


def init_linear(params: Params, prefix: str, d_in: int, d_out: int, rng, dtype=np.float32,
                bias: bool = True, zero: bool = False) -> None:
    w = np.zeros((d_in, d_out), dtype) if zero else trunc_normal(rng, (d_in, d_out), dtype=dtype)
    _param(params, f"{prefix}.w", w)
    if bias:
        _param(params, f"{prefix}.b", np.zeros(d_out, dtype))


def init_norm(params: Params, prefix: str, d: int, dtype=np.float32) -> None:
    _param(params, f"{prefix}.g", np.ones(d, dtype))
    _param(params, f"{prefix}.b", np.zeros(d, dtype))


def linear(x: Tensor, params: Params, prefix: str) -> Tensor:
    y = T.matmul(x, params[f"{prefix}.w"])
    b = params.get(f"{prefix}.b")
    return y if b is None else y + b


def norm(x: Tensor, params: Params, prefix: str, eps: float = 1e-6) -> Tensor:
    return T.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"], eps)


def patch_embed(patches, proj: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Project flattened patches ``[.., N, P*P*C]`` to tokens ``[.., N, d]``.

    No positional information is added here.
    """
    patches = T.as_tensor(patches, like=proj)
    if patches.shape[-1] != proj.shape[0]:
        raise ValueError(f"patch_embed: patch width {patches.shape[-1]} does not match "
                         f"projection {proj.shape}")
    y = T.matmul(patches, proj)
    return y if bias is None else y + bias


def positional_embedding(grid_h: int, grid_w: int, d: int, dtype=np.float32) -> np.ndarray:
    """Fixed 2-D sine-cosine table of shape ``[grid_h * grid_w, d]``.

    Half of the channels encode the row, half the column; rows follow the
    row-major patch order used by :func:`bootmae.masking.patchify`.
    """
    if d % 4:
        raise ConfigError(f"positional embedding width must be divisible by 4, got {d}")
    quarter = d // 4
    omega = 1.0 / 10000 ** (np.arange(quarter, dtype=np.float64) / quarter)
    rows, cols = np.meshgrid(np.arange(grid_h, dtype=np.float64),
                             np.arange(grid_w, dtype=np.float64), indexing="ij")

    def encode(pos):
        angles = np.outer(pos.reshape(-1), omega)
        return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)

    return np.concatenate([encode(rows), encode(cols)], axis=1).astype(dtype)


# attention ------------------------------------------------------------------

def init_self_attention(params: Params, prefix: str, d: int, rng, dtype=np.float32) -> None:
    for name in ("q", "k", "v"):
        init_linear(params, f"{prefix}.{name}", d, d, rng, dtype)
    init_linear(params, f"{prefix}.proj", d, d, rng, dtype, zero=True)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, t, d = x.shape
    x = T.reshape(x, tuple(lead) + (t, heads, d // heads))
    n = x.ndim
    axes = list(range(n - 3)) + [n - 2, n - 3, n - 1]
    return T.transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    n = x.ndim
    axes = list(range(n - 3)) + [n - 2, n - 3, n - 1]
    x = T.transpose(x, axes)
    *lead, t, h, dh = x.shape
    return T.reshape(x, tuple(lead) + (t, h * dh))


def attention_weights(q: Tensor, k: Tensor, scale: float) -> Tensor:
    return T.softmax(T.scale(T.matmul(q, T.transpose(k)), scale), axis=-1)


def self_attention(x: Tensor, params: Params, prefix: str, heads: int) -> Tensor:
    """Multi-head scaled dot-product self-attention with output projection."""
    d = x.shape[-1]
    if d % heads:
        raise ConfigError(f"width {d} is not divisible by {heads} heads")
    q = _split_heads(linear(x, params, f"{prefix}.q"), heads)
    k = _split_heads(linear(x, params, f"{prefix}.k"), heads)
    v = _split_heads(linear(x, params, f"{prefix}.v"), heads)
    attn = attention_weights(q, k, 1.0 / np.sqrt(d // heads))
    return linear(_merge_heads(T.matmul(attn, v)), params, f"{prefix}.proj")


def init_cross_attention(params: Params, prefix: str, d_dec: int, d_enc: int, rng,
                         dtype=np.float32, query_norm: bool = True, out_proj: bool = True) -> None:
    init_linear(params, f"{prefix}.q", d_dec, d_dec, rng, dtype, bias=False)
    init_linear(params, f"{prefix}.k", d_enc, d_dec, rng, dtype, bias=False)
    init_linear(params, f"{prefix}.v", d_enc, d_dec, rng, dtype, bias=False)
    if query_norm:
        init_norm(params, f"{prefix}.norm", d_dec, dtype)
    if out_proj:
        init_linear(params, f"{prefix}.proj", d_dec, d_dec, rng, dtype, zero=True)


def cross_attention(queries: Tensor, inject: Tensor, params: Params, prefix: str) -> Tensor:
    """Inject encoder features into a decoder stream.

    Computes ``queries + softmax(Q K^T / sqrt(d_dec)) V`` with ``Q`` projected
    from the (optionally normalized) decoder tokens and ``K``, ``V`` projected
    from ``inject``. A single head, scaled by the full decoder width. When
    the collection holds ``{prefix}.proj`` the attended values pass through
    that output projection before the residual sum.
    """
    if queries.shape[:-2] != inject.shape[:-2]:
        raise ContractError(f"cross_attention: batch axes differ, {queries.shape} vs {inject.shape}")
    d_dec = queries.shape[-1]
    src = norm(queries, params, f"{prefix}.norm") if f"{prefix}.norm.g" in params else queries
    q = linear(src, params, f"{prefix}.q")
    k = linear(inject, params, f"{prefix}.k")
    v = linear(inject, params, f"{prefix}.v")
    attended = T.matmul(attention_weights(q, k, 1.0 / np.sqrt(d_dec)), v)
    if f"{prefix}.proj.w" in params:
        attended = linear(attended, params, f"{prefix}.proj")
    return queries + attended


# transformer block ----------------------------------------------------------

def init_block(params: Params, prefix: str, d: int, rng, dtype=np.float32, mlp_ratio: int = 4,
               inject_dim: Optional[int] = None, query_norm: bool = True,
               out_proj: bool = True) -> None:
    init_norm(params, f"{prefix}.norm1", d, dtype)
    init_self_attention(params, f"{prefix}.attn", d, rng, dtype)
    if inject_dim is not None:
        init_cross_attention(params, f"{prefix}.cross", d, inject_dim, rng, dtype,
                             query_norm=query_norm, out_proj=out_proj)
    init_norm(params, f"{prefix}.norm2", d, dtype)
    init_linear(params, f"{prefix}.mlp.fc1", d, mlp_ratio * d, rng, dtype)
    init_linear(params, f"{prefix}.mlp.fc2", mlp_ratio * d, d, rng, dtype, zero=True)


def has_cross(params: Params, prefix: str) -> bool:
    return f"{prefix}.cross.q.w" in params


def mlp(x: Tensor, params: Params, prefix: str) -> Tensor:
    return linear(T.gelu(linear(x, params, f"{prefix}.fc1")), params, f"{prefix}.fc2")


def transformer_block(x: Tensor, params: Params, prefix: str, heads: int,
                      inject: Optional[Tensor] = None) -> Tensor:
    """Pre-norm block: self-attention, optional cross-attention, MLP."""
    cross = has_cross(params, prefix)
    if inject is not None and not cross:
        raise ContractError(f"{prefix} has no cross-attention but an injected feature was given")
    if cross and inject is None:
        raise ContractError(f"{prefix} needs an injected feature")
    x = x + self_attention(norm(x, params, f"{prefix}.norm1"), params, f"{prefix}.attn", heads)
    if cross:
        x = cross_attention(x, inject, params, f"{prefix}.cross")
    return x + mlp(norm(x, params, f"{prefix}.norm2"), params, f"{prefix}.mlp")
