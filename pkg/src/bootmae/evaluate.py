"""Downstream protocols: end-to-end fine-tuning and linear probing."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .config import RunConfig, TrainConfig, from_mapping
from .data import Dataset, augment
from .exceptions import CheckpointError, ContractError
from .model import BootMAEModel
from .nn import Params
from .optim import AdamState, LrSchedule, adam_step, lr_at
from .tensor import Tensor

EVAL_FIELDS = ("epoch", "split", "top1", "loss")


def _require_labels(*datasets: Dataset) -> None:
    for ds in datasets:
        if ds is not None and ds.labels is None:
            raise ContractError(f"{ds.split} dataset has no labels")


def init_head(d: int, num_classes: int, dtype=np.float32) -> Params:
    """Zero-initialized linear classifier (all logits tie until trained)."""
    return {"head.w": Tensor(np.zeros((d, num_classes), dtype), True, name="head.w"),
            "head.b": Tensor(np.zeros(num_classes, dtype), True, name="head.b")}


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    picked = T.gather(T.log_softmax(logits, axis=-1), np.asarray(labels)[:, None])
    return T.neg(T.mean(picked))


def _logits(features: Tensor, head: Params) -> Tensor:
    return T.matmul(features, head["head.w"]) + head["head.b"]


def layer_scales(params: Params, depth: int, decay: float) -> Dict[str, float]:
    """Layer-wise lr factors: ``decay ** (depth + 1 - layer)``, head at layer ``depth + 1``."""
    scales = {}
    for name in params:
        if name.startswith("encoder.patch"):
            layer = 0
        elif name.startswith("encoder.blocks."):
            layer = int(name.split(".")[2]) + 1
        else:
            layer = depth + 1
        scales[name] = decay ** (depth + 1 - layer)
    return scales


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=-1) == labels))


# fine-tuning ---------------------------------------------------------------

@dataclass
class FinetuneState:
    config: RunConfig
    model: BootMAEModel
    head: Params
    adam: AdamState
    rng: np.random.Generator
    epoch: int = 0
    step: int = 0
    metrics: List[dict] = field(default_factory=list)

    @property
    def params(self) -> Params:
        return {**self.model.encoder_params(), **self.head}


def init_finetune(model: BootMAEModel, config: RunConfig, num_classes: int) -> FinetuneState:
    """Copy the encoder of ``model`` and attach a fresh head."""
    enc = {k: Tensor(v.data.copy(), True, name=k) for k, v in model.params.items() if k.startswith("encoder.")}
    tuned = BootMAEModel(model.cfg, enc)
    t = config.train
    return FinetuneState(config, tuned, init_head(model.cfg.enc_dim, num_classes, tuned.dtype),
                         AdamState(t.beta1, 0.999, t.adam_eps),
                         np.random.default_rng([t.seed, 7]))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def evaluate(model: BootMAEModel, head: Params, dataset: Dataset, batch_size: int = 64):
    """``(top1, mean loss)`` on full, unmasked images."""
    _require_labels(dataset)
    logits = []
    with T.no_grad():
        for i in range(0, len(dataset), batch_size):
            logits.append(_logits(model.features(dataset.images[i:i + batch_size]), head).data)
    logits = np.concatenate(logits)
    loss = cross_entropy(Tensor(logits), dataset.labels).item()
    return accuracy(logits, dataset.labels), loss


def finetune_epoch(state: FinetuneState, train: Dataset, test: Optional[Dataset] = None) -> List[dict]:
    t = state.config.train
    cfg = state.model.cfg
    spe = -(-len(train) // t.batch_size)
    schedule = LrSchedule(t.eval_lr, t.eval_warmup_epochs * spe, t.eval_epochs * spe)
    params = state.params
    scales = layer_scales(params, cfg.enc_depth, t.layer_decay)
    losses, correct = [], 0
    for idx in _batches(len(train), t.batch_size, state.rng):
        images = train.images[idx]
        if t.augment:
            images = augment(images, state.rng, cfg.patch_size)
        for p in params.values():
            p.zero_grad()
        logits = _logits(state.model.features(images), state.head)
        loss = cross_entropy(logits, train.labels[idx])
        loss.backward()
        adam_step(params, state.adam, lr_at(state.step, schedule), t.eval_weight_decay,
                  lr_scale=scales, clip_grad=t.clip_grad)
        state.step += 1
        losses.append(loss.item() * len(idx))
        correct += int(np.sum(np.argmax(logits.data, -1) == train.labels[idx]))
    state.epoch += 1
    rows = [{"epoch": state.epoch, "split": "train", "top1": correct / len(train),
             "loss": float(np.sum(losses) / len(train))}]
    if test is not None:
        top1, loss = evaluate(state.model, state.head, test)
        rows.append({"epoch": state.epoch, "split": "test", "top1": top1, "loss": loss})
    state.metrics.extend(rows)
    return rows


def finetune(model: BootMAEModel, train: Dataset, test: Optional[Dataset], config: RunConfig,
             state: Optional[FinetuneState] = None, epochs: Optional[int] = None) -> FinetuneState:
    """Train encoder and head jointly; ``model`` itself is never modified."""
    _require_labels(train, test)
    if state is None:
        state = init_finetune(model, config, train.num_classes)
    target = config.train.eval_epochs if epochs is None else epochs
    while state.epoch < target:
        finetune_epoch(state, train, test)
    return state


def save_finetune(state: FinetuneState, path) -> None:
    arrays = {f"param/{k}": v.data for k, v in state.params.items()}
    arrays.update({f"adam_m/{k}": v for k, v in state.adam.m.items()})
    arrays.update({f"adam_v/{k}": v for k, v in state.adam.v.items()})
    header = {"kind": "finetune", "config": state.config.to_flat(), "epoch": state.epoch,
              "step": state.step, "adam_step": state.adam.step,
              "rng": state.rng.bit_generator.state, "metrics": state.metrics,
              "num_classes": int(state.head["head.b"].shape[0])}
    ckpt.write_container(path, header, arrays)


def load_finetune(path) -> FinetuneState:
    header, arrays = ckpt.read_container(path)
    if header.get("kind") != "finetune":
        raise CheckpointError(f"{path}: not a fine-tuning checkpoint")
    config = from_mapping(header["config"])
    base = BootMAEModel(config.model, seed=0)
    state = init_finetune(base, config, int(header["num_classes"]))
    params = state.params
    expected = {f"param/{k}": v.shape for k, v in params.items()}
    for prefix in ("adam_m/", "adam_v/"):
        expected.update({n: params[n[len(prefix):]].shape for n in arrays
                         if n.startswith(prefix) and n[len(prefix):] in params})
    ckpt.check_shapes(expected, arrays, path)
    for k, p in params.items():
        p.data = arrays[f"param/{k}"].copy()
    state.adam.m = {n[7:]: a.copy() for n, a in arrays.items() if n.startswith("adam_m/")}
    state.adam.v = {n[7:]: a.copy() for n, a in arrays.items() if n.startswith("adam_v/")}
    state.adam.step = int(header["adam_step"])
    state.epoch, state.step = int(header["epoch"]), int(header["step"])
    state.rng.bit_generator.state = header["rng"]
    state.metrics = list(header["metrics"])
    return state


# linear probing ------------------------------------------------------------

@dataclass
class ProbeResult:
    head: Params
    mean: np.ndarray
    std: np.ndarray
    metrics: List[dict]

    @property
    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.head.values()))

    def logits(self, features: np.ndarray) -> np.ndarray:
        z = (features - self.mean) / self.std
        return z @ self.head["head.w"].data + self.head["head.b"].data


def extract_features(model: BootMAEModel, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    with T.no_grad():
        return np.concatenate([model.features(images[i:i + batch_size]).data
                               for i in range(0, len(images), batch_size)])


def linear_probe(model: BootMAEModel, train: Dataset, test: Optional[Dataset],
                 config: TrainConfig) -> ProbeResult:
    """Train a linear classifier on frozen, standardized pooled features."""
    _require_labels(train, test)
    feats = extract_features(model, train.images)
    mean = feats.mean(axis=0)
    std = np.sqrt(feats.var(axis=0) + 1e-6)
    z = ((feats - mean) / std).astype(model.dtype)
    head = init_head(z.shape[1], train.num_classes, model.dtype)
    adam = AdamState(config.beta1, 0.999, config.adam_eps)
    rng = np.random.default_rng([config.seed, 11])
    spe = -(-len(train) // config.batch_size)
    schedule = LrSchedule(config.probe_lr, 0, config.probe_epochs * spe)
    test_z = None if test is None else (extract_features(model, test.images) - mean) / std
    metrics, step = [], 0
    for epoch in range(1, config.probe_epochs + 1):
        for idx in _batches(len(z), config.batch_size, rng):
            for p in head.values():
                p.zero_grad()
            loss = cross_entropy(_logits(Tensor(z[idx]), head), train.labels[idx])
            loss.backward()
            adam_step(head, adam, lr_at(step, schedule), 0.0)
            step += 1
        result = ProbeResult(head, mean, std, metrics)
        train_logits = result.logits(feats)
        metrics.append({"epoch": epoch, "split": "train", "top1": accuracy(train_logits, train.labels),
                        "loss": cross_entropy(Tensor(train_logits), train.labels).item()})
        if test_z is not None:
            lg = test_z @ head["head.w"].data + head["head.b"].data
            metrics.append({"epoch": epoch, "split": "test", "top1": accuracy(lg, test.labels),
                            "loss": cross_entropy(Tensor(lg), test.labels).item()})
    return ProbeResult(head, mean, std, metrics)
