"""scikit-learn compatible wrappers around pretraining and evaluation."""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_is_fitted

from .config import RunConfig, toy_config
from .data import Dataset
from .engine import init_state, pretrain
from .evaluate import extract_features, finetune, linear_probe
from .exceptions import ContractError
from .model import BootMAEModel

_INJECT = {"on": ("low", "high"), "off": ("none", "none"),
           "low": ("low", "high"), "mid": ("mid", "high"), "high": ("high", "high")}


def inject_levels(inject: str):
    """Map a ``--inject`` value to ``(reg_inject, pred_inject)``."""
    try:
        return _INJECT[inject]
    except KeyError:
        raise ValueError(f"inject must be one of {sorted(_INJECT)}, got {inject!r}") from None


def check_images(X, img_size: Optional[int] = None, in_chans: Optional[int] = None) -> np.ndarray:
    """Validate an image batch ``[n, H, W, C]`` and return it as float32."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4:
        raise ValueError(f"expected images of shape (n, H, W, C), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("no images given")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain non-finite values")
    if img_size is not None and X.shape[1:3] != (img_size, img_size):
        raise ValueError(f"images are {X.shape[1]}x{X.shape[2]}, model expects {img_size}x{img_size}")
    if in_chans is not None and X.shape[3] != in_chans:
        raise ValueError(f"images have {X.shape[3]} channels, model expects {in_chans}")
    return X


class BootMAE(TransformerMixin, BaseEstimator):
    """Self-supervised pretraining as a transformer.

    ``fit`` pretrains an encoder on unlabelled images; ``transform`` returns
    average-pooled encoder features of full (unmasked) images.

    Parameters
    ----------
    config : RunConfig, optional
        Base configuration; the toy preset when omitted.
    epochs, seed, mask, lam, inject, ema_fraction :
        Overrides of the matching configuration entries when not None.
    """

    def __init__(self, config: Optional[RunConfig] = None, epochs: Optional[int] = None,
                 seed: Optional[int] = None, mask: Optional[str] = None, lam: Optional[float] = None,
                 inject: Optional[str] = None, ema_fraction: Optional[float] = None):
        self.config = config
        self.epochs = epochs
        self.seed = seed
        self.mask = mask
        self.lam = lam
        self.inject = inject
        self.ema_fraction = ema_fraction

    def resolved_config(self) -> RunConfig:
        base = self.config if self.config is not None else toy_config()
        over = {k: v for k, v in (("epochs", self.epochs), ("seed", self.seed), ("mask", self.mask),
                                  ("lam", self.lam), ("ema_fraction", self.ema_fraction))
                if v is not None}
        if self.inject is not None:
            over["reg_inject"], over["pred_inject"] = inject_levels(self.inject)
        return base.replace(**over)

    def fit(self, X, y=None):
        cfg = self.resolved_config()
        X = check_images(X, cfg.model.img_size, cfg.model.in_chans)
        self.state_ = pretrain(X, init_state(cfg))
        self.model_ = self.state_.model
        self.n_features_out_ = cfg.model.enc_dim
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_images(X, self.model_.cfg.img_size, self.model_.cfg.in_chans)
        return extract_features(self.model_, X)

    @property
    def metrics_(self):
        return self.state_.metrics


class _EncoderClassifier(ClassifierMixin, BaseEstimator):
    def _prepare(self, X, y):
        if self.encoder is None:
            raise ContractError("an encoder (BootMAEModel or fitted BootMAE) is required")
        encoder = self.encoder.model_ if isinstance(self.encoder, BootMAE) else self.encoder
        X = check_images(X, encoder.cfg.img_size, encoder.cfg.in_chans)
        self.classes_ = unique_labels(y)
        y_idx = np.searchsorted(self.classes_, y)
        return encoder, Dataset(X, y_idx)

    def _run_config(self, encoder: BootMAEModel) -> RunConfig:
        base = RunConfig(encoder.cfg)
        over = dict(eval_epochs=self.epochs, eval_lr=self.lr, batch_size=self.batch_size,
                    seed=self.seed)
        return base.replace(**{k: v for k, v in over.items() if v is not None}, **self._extra())

    def _extra(self):
        return {}

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)


class LinearProbeClassifier(_EncoderClassifier):
    """Linear classifier on frozen, average-pooled encoder features."""

    def __init__(self, encoder=None, epochs: int = 100, lr: float = 1e-2, batch_size: int = 8,
                 seed: int = 0):
        self.encoder = encoder
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed

    def _run_config(self, encoder):
        base = RunConfig(encoder.cfg)
        return base.replace(probe_epochs=self.epochs, probe_lr=self.lr,
                            batch_size=self.batch_size, seed=self.seed)

    def fit(self, X, y):
        encoder, ds = self._prepare(X, y)
        self.encoder_ = encoder
        self.result_ = linear_probe(encoder, ds, None, self._run_config(encoder).train)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "result_")
        X = check_images(X, self.encoder_.cfg.img_size, self.encoder_.cfg.in_chans)
        return self.result_.logits(extract_features(self.encoder_, X))


class FineTuneClassifier(_EncoderClassifier):
    """End-to-end fine-tuning of a copy of the encoder plus a linear head."""

    def __init__(self, encoder=None, epochs: int = 30, lr: float = 1e-3, batch_size: int = 8,
                 layer_decay: float = 1.0, augment: bool = True, seed: int = 0):
        self.encoder = encoder
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.layer_decay = layer_decay
        self.augment = augment
        self.seed = seed

    def _extra(self):
        return dict(layer_decay=self.layer_decay, augment=self.augment)

    def fit(self, X, y):
        encoder, ds = self._prepare(X, y)
        self.state_ = finetune(encoder, ds, None, self._run_config(encoder))
        return self

    def decision_function(self, X):
        check_is_fitted(self, "state_")
        model = self.state_.model
        X = check_images(X, model.cfg.img_size, model.cfg.in_chans)
        feats = extract_features(model, X)
        head = self.state_.head
        return feats @ head["head.w"].data + head["head.b"].data
