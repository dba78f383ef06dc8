"""Model and run configuration with a flat ``key = value`` file format.

Keys are the dataclass field names of :class:`ModelConfig` and
:class:`TrainConfig`; they share one namespace. Blank lines and ``#``
comments are ignored. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

from .exceptions import ConfigError

INJECT_LEVELS = ("low", "mid", "high", "none")


@dataclass
class ModelConfig:
    """Architecture, masking, loss and momentum hyperparameters."""

    img_size: int = 16              # square image side
    in_chans: int = 3
    patch_size: int = 4
    enc_dim: int = 32
    enc_depth: int = 2
    enc_heads: int = 4
    reg_dim: int = 512              # regressor width
    reg_depth: int = 2
    reg_heads: int = 8
    pred_depth: int = 2             # predictor width is enc_dim
    pred_heads: int = 4
    mlp_ratio: int = 4
    reg_inject: str = "low"         # encoder tap fed to the regressor: low|mid|high|none
    pred_inject: str = "high"       # encoder tap fed to the predictor
    inject_normed: bool = False     # apply the final encoder norm to injected taps
    cross_query_norm: bool = True   # layer-norm decoder tokens before forming queries
    cross_out_proj: bool = True     # output projection on the attended values
    head_norm: bool = True          # layer-norm before each decoder head
    mask: str = "block"             # random|block
    mask_ratio: float = 0.75
    min_block: int = 0              # 0: scale 16 / 196 of the grid
    max_block: int = 0              # 0: scale 60 / 196 of the grid
    aspect_min: float = 0.3
    w_center: float = 1.0           # loss weight of block-interior cells
    lam: float = 1.0                # feature-loss weight
    pixel_loss: bool = True         # false drops the pixel term (feature-only target)
    target_norm: bool = True        # final norm on momentum-encoder outputs
    ema_fraction: float = 1.0       # share of patches fed to the momentum encoder
    ema_fraction_mode: str = "image"  # image|masked
    momentum_start: float = 0.999
    momentum_mid: float = 0.9999
    momentum_ramp1: float = 100.0   # epochs
    momentum_end: Optional[float] = None
    momentum_ramp2: float = 400.0   # epochs, reached from epoch 0 when momentum_end is set

    def __post_init__(self):
        self.validate()

    @property
    def grid(self) -> int:
        return self.img_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.in_chans

    def block_bounds(self) -> Tuple[int, int]:
        n = self.num_patches
        lo = self.min_block or max(1, int(round(16 / 196 * n)))
        hi = self.max_block or max(lo, int(round(60 / 196 * n)))
        return lo, hi

    def validate(self) -> None:
        if self.patch_size <= 0 or self.img_size % self.patch_size:
            raise ConfigError(f"patch_size {self.patch_size} must divide img_size {self.img_size}")
        for name, width, heads in (("enc", self.enc_dim, self.enc_heads),
                                   ("reg", self.reg_dim, self.reg_heads),
                                   ("pred", self.enc_dim, self.pred_heads)):
            if width % heads:
                raise ConfigError(f"{name} width {width} not divisible by {heads} heads")
            if width % 4:
                raise ConfigError(f"{name} width {width} must be divisible by 4")
        if self.enc_depth < 1:
            raise ConfigError("enc_depth must be >= 1")
        for name in ("reg_inject", "pred_inject"):
            if getattr(self, name) not in INJECT_LEVELS:
                raise ConfigError(f"{name} must be one of {INJECT_LEVELS}")
        if self.mask not in ("random", "block"):
            raise ConfigError(f"mask must be random or block, got {self.mask!r}")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError("mask_ratio must lie in [0, 1]")
        if self.ema_fraction_mode not in ("image", "masked"):
            raise ConfigError("ema_fraction_mode must be image or masked")
        if not 0.0 < self.ema_fraction <= 1.0:
            raise ConfigError("ema_fraction must lie in (0, 1]")
        if not self.pixel_loss and not self.lam:
            raise ConfigError("pixel_loss=false with lam=0 leaves no objective")
        if self.w_center < 1.0:
            raise ConfigError("w_center must be >= 1")


@dataclass
class TrainConfig:
    """Optimization, data and bookkeeping settings."""

    seed: int = 0
    epochs: int = 20
    batch_size: int = 8
    lr: Optional[float] = None      # absolute lr; None applies blr * batch_size / 256
    blr: float = 1.5e-4
    warmup_epochs: Optional[float] = None  # None: 40 / 800 of the epochs
    min_lr: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    weight_decay: float = 0.05
    clip_grad: Optional[float] = None
    dataset: str = "synth"          # synth or a directory of PPM/PGM files
    n_train: int = 64
    n_test: int = 64
    num_classes: int = 4
    data_seed: int = 0
    checkpoint_every: int = 0       # epochs; 0 keeps only the final checkpoint
    gallery: int = 4                # images in the reconstruction gallery
    # downstream evaluation
    eval_epochs: int = 30
    eval_lr: float = 1e-3
    eval_warmup_epochs: float = 3.0
    eval_weight_decay: float = 0.05
    layer_decay: float = 1.0
    probe_epochs: int = 100
    probe_lr: float = 1e-2
    augment: bool = True

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")

    def resolved_lr(self) -> float:
        return self.lr if self.lr is not None else self.blr * self.batch_size / 256

    def resolved_warmup(self) -> float:
        return self.warmup_epochs if self.warmup_epochs is not None else self.epochs * 40 / 800


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_flat(self) -> Dict[str, Any]:
        return {**dataclasses.asdict(self.model), **dataclasses.asdict(self.train)}

    def dumps(self) -> str:
        lines = []
        for key, value in self.to_flat().items():
            lines.append(f"{key} = {_format(value)}")
        return "\n".join(lines) + "\n"

    def replace(self, **overrides) -> "RunConfig":
        return from_mapping({**self.to_flat(), **overrides})


# Desk-scale preset: 64-wide regressor (a 512-wide one is ~10x slower per step
# at 16x16 images) and an absolute learning rate instead of the batch rule.
TOY_OVERRIDES = dict(reg_dim=64, reg_heads=4, lr=1.5e-3, warmup_epochs=10.0)


def toy_config(**overrides) -> RunConfig:
    return RunConfig().replace(**{**TOY_OVERRIDES, **overrides})


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _hints(cls) -> Dict[str, Any]:
    return typing.get_type_hints(cls)


_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


def _coerce(key: str, raw: Any, hint) -> Any:
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    optional = typing.get_origin(hint) is typing.Union and type(None) in typing.get_args(hint)
    if optional:
        if text.lower() in ("none", "null", ""):
            return None
        hint = next(a for a in typing.get_args(hint) if a is not type(None))
    try:
        if hint is bool:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return text


def from_mapping(values: Mapping[str, Any]) -> RunConfig:
    """Build a :class:`RunConfig` from flat keys, rejecting unknown ones."""
    unknown = sorted(set(values) - _MODEL_KEYS - _TRAIN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    mh, th = _hints(ModelConfig), _hints(TrainConfig)
    model = {k: _coerce(k, v, mh[k]) for k, v in values.items() if k in _MODEL_KEYS}
    train = {k: _coerce(k, v, th[k]) for k, v in values.items() if k in _TRAIN_KEYS}
    return RunConfig(ModelConfig(**model), TrainConfig(**train))


def parse_config_text(text: str) -> Dict[str, str]:
    values: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def load_config(path, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    values: Dict[str, Any] = parse_config_text(Path(path).read_text()) if path else {}
    values.update(overrides or {})
    return from_mapping(values)
