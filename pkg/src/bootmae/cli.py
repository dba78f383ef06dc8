"""Command line entry point: ``bootmae {pretrain,finetune,probe,mask-viz,ablate-mask}``."""

from __future__ import annotations

import argparse
import logging
import math
import shutil
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import engine
from .config import TOY_OVERRIDES, RunConfig, from_mapping, parse_config_text
from .data import Dataset, load_images, train_test, write_pnm
from .estimators import inject_levels
from .evaluate import (EVAL_FIELDS, finetune_epoch, init_finetune, linear_probe, load_finetune,
                       save_finetune)
from .exceptions import CheckpointError, ConfigError, ContractError, ImageFileError
from .masking import (PatchGrid, block_mask, largest_component, make_plan, masked_count, patchify,
                      random_mask, unpatchify)
from .model import BatchIndex
from .objectives import EPS
from .tensor import NumericError, no_grad

logger = logging.getLogger("bootmae")

EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 2, 3, 4
_MODEL_GEOMETRY = ("img_size", "patch_size", "in_chans", "enc_dim", "enc_depth", "enc_heads", "mlp_ratio")


class OutputExists(RuntimeError):
    pass


# configuration -----------------------------------------------------------

def _flag_overrides(args) -> Dict[str, object]:
    over: Dict[str, object] = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        over[k.strip()] = v.strip()
    for flag, key in (("seed", "seed"), ("epochs", "epochs"), ("mask", "mask"),
                      ("lam", "lam"), ("ema_fraction", "ema_fraction")):
        value = getattr(args, flag, None)
        if value is not None:
            over[key] = value
    if getattr(args, "inject", None) is not None:
        over["reg_inject"], over["pred_inject"] = inject_levels(args.inject)
    return over


def user_values(args) -> Dict[str, object]:
    values: Dict[str, object] = {}
    if args.config:
        values.update(parse_config_text(Path(args.config).read_text()))
    values.update(_flag_overrides(args))
    return values


def resolve_config(args) -> RunConfig:
    """Toy preset, then the config file, then command-line flags."""
    return from_mapping({**TOY_OVERRIDES, **user_values(args)})


def prepare_out(out: Path, overwrite: bool, resume: bool = False) -> Path:
    if out.exists() and any(out.iterdir()) and not (overwrite or resume):
        raise OutputExists(f"{out} is not empty; pass --overwrite to replace its contents")
    if out.exists() and overwrite and not resume:
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_echo(cfg: RunConfig, out: Path) -> None:
    (out / "config-echo.txt").write_text(cfg.dumps())


def load_data(cfg: RunConfig):
    """``(train, test)`` datasets per the ``dataset`` key."""
    t, m = cfg.train, cfg.model
    if t.dataset == "synth":
        return train_test(t.num_classes, t.n_train, t.n_test, m.img_size, m.in_chans, t.data_seed)
    root = Path(t.dataset)
    if (root / "train").is_dir():
        train = load_images(root / "train")
        test = load_images(root / "test") if (root / "test").is_dir() else None
        if test is not None:
            test.images = ((test.images * test.std + test.mean - train.mean) / train.std).astype(np.float32)
            test.split = "test"
    else:
        train, test = load_images(root), None
    if train.images.shape[1:] != (m.img_size, m.img_size, m.in_chans):
        raise ConfigError(f"images in {root} are {train.images.shape[1:]}, config expects "
                          f"{(m.img_size, m.img_size, m.in_chans)}")
    return train, test


def write_rows(rows: List[dict], path: Path, fields) -> None:
    engine.write_metrics(rows, path, fields)


# gallery -------------------------------------------------------------------

def _display(img: np.ndarray, data: Dataset) -> np.ndarray:
    if data.mean is not None:
        img = img * data.std + data.mean
    return np.clip(img, 0.0, 1.0)


def write_gallery(state: engine.TrainState, data: Dataset, out: Path, count: int) -> None:
    """Per image: input | masked input | reconstruction, as one PPM/PGM strip."""
    cfg = state.config.model
    if count <= 0:
        return
    images = data.images[:count]
    rng = np.random.default_rng([state.config.train.seed, 99])
    lo, hi = cfg.block_bounds()
    plans = [make_plan(cfg.mask, cfg.grid, cfg.grid, cfg.mask_ratio, rng, lo, hi, cfg.aspect_min)
             for _ in images]
    index = BatchIndex.from_plans(plans)
    patches = patchify(images, cfg.patch_size)
    with no_grad():
        x_bar = state.model.forward_patches(patches, index).x_bar.data
    mean = patches.mean(axis=-1, keepdims=True)
    std = np.sqrt(patches.var(axis=-1, keepdims=True) + EPS)
    recon = x_bar * std + mean
    grid = PatchGrid(cfg.img_size, cfg.img_size, cfg.in_chans, cfg.patch_size)
    for i, plan in enumerate(plans):
        masked_in = patches[i].copy()
        masked_in[plan.masked] = 0.0 if data.mean is None else -data.mean / data.std
        pasted = patches[i].copy()
        pasted[plan.masked] = recon[i][plan.masked]
        tiles = [_display(unpatchify(p, grid), data) for p in (patches[i], masked_in, pasted)]
        sep = np.ones((cfg.img_size, 1, cfg.in_chans), dtype=np.float32)
        strip = np.concatenate([tiles[0], sep, tiles[1], sep, tiles[2]], axis=1)
        write_pnm(out / f"gallery_{i:03d}{'.ppm' if cfg.in_chans == 3 else '.pgm'}", strip)


# commands ------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    if args.resume:
        state = engine.load_checkpoint(args.resume)
        values = user_values(args)
        cfg = state.config.replace(**{k: v for k, v in values.items() if k in ("epochs", "checkpoint_every")})
        state.config = cfg
    else:
        cfg = resolve_config(args)
        state = engine.init_state(cfg)
    out = prepare_out(Path(args.out), args.overwrite, resume=bool(args.resume))
    write_echo(cfg, out)
    train, _ = load_data(cfg)
    every = cfg.train.checkpoint_every

    def on_epoch(st):
        write_rows(st.metrics, out / "metrics.csv", engine.METRIC_FIELDS)
        if every and st.epoch % every == 0:
            engine.save_checkpoint(st, out / f"checkpoint_{st.epoch:04d}.ckpt")

    try:
        engine.pretrain(train.images, state, on_epoch=on_epoch)
    except NumericError:
        engine.save_checkpoint(state, out / "failed.ckpt")
        raise
    write_rows(state.metrics, out / "metrics.csv", engine.METRIC_FIELDS)
    engine.save_checkpoint(state, out / "final.ckpt")
    write_gallery(state, train, out, cfg.train.gallery)
    return 0


def _eval_setup(args):
    """Encoder model and run config for finetune / probe, with geometry checks."""
    values = user_values(args)
    model = engine.load_encoder(args.checkpoint)
    stored = RunConfig(model.cfg)
    requested = from_mapping({**stored.to_flat(), **values})
    for key in _MODEL_GEOMETRY:
        if getattr(requested.model, key) != getattr(model.cfg, key):
            raise CheckpointError(f"{args.checkpoint}: {key}={getattr(model.cfg, key)} in checkpoint, "
                                  f"{values[key]} requested")
    train_keys = {k: v for k, v in values.items() if k in requested.to_flat() and k not in model.cfg.__dict__}
    return model, stored.replace(**train_keys)


def cmd_finetune(args) -> int:
    if args.resume:
        state = load_finetune(args.resume)
        cfg = state.config
        values = user_values(args)
        if "eval_epochs" in values:
            cfg = state.config = cfg.replace(eval_epochs=values["eval_epochs"])
    else:
        if not args.checkpoint:
            raise ConfigError("finetune needs --checkpoint (or --resume)")
        model, cfg = _eval_setup(args)
        state = None
    out = prepare_out(Path(args.out), args.overwrite, resume=bool(args.resume))
    write_echo(cfg, out)
    train, test = load_data(cfg)
    if train.labels is None:
        raise ContractError("finetune needs a labelled dataset")
    if state is None:
        state = init_finetune(model, cfg, train.num_classes)
    every = cfg.train.checkpoint_every
    while state.epoch < cfg.train.eval_epochs:
        finetune_epoch(state, train, test)
        write_rows(state.metrics, out / "metrics.csv", EVAL_FIELDS)
        if every and state.epoch % every == 0:
            save_finetune(state, out / f"finetune_{state.epoch:04d}.ckpt")
    write_rows(state.metrics, out / "metrics.csv", EVAL_FIELDS)
    save_finetune(state, out / "finetune_final.ckpt")
    return 0


def cmd_probe(args) -> int:
    if not args.checkpoint:
        raise ConfigError("probe needs --checkpoint")
    model, cfg = _eval_setup(args)
    out = prepare_out(Path(args.out), args.overwrite)
    write_echo(cfg, out)
    train, test = load_data(cfg)
    if train.labels is None:
        raise ContractError("probe needs a labelled dataset")
    result = linear_probe(model, train, test, cfg.train)
    write_rows(result.metrics, out / "metrics.csv", EVAL_FIELDS)
    return 0


def _mask_image(grid_mask: np.ndarray, cell: int) -> np.ndarray:
    """Masked cells dark, visible cells light, one-pixel grid lines."""
    img = np.where(grid_mask, 0.0, 1.0)
    img = np.kron(img, np.ones((cell, cell)))
    img[::cell, :] = np.minimum(img[::cell, :], 0.6)
    img[:, ::cell] = np.minimum(img[:, ::cell], 0.6)
    return img


def cmd_mask_viz(args) -> int:
    out = prepare_out(Path(args.out), args.overwrite)
    g, ratio, n = args.grid, args.ratio, args.samples
    lo = args.min_block or max(1, round(16 / 196 * g * g))
    hi = args.max_block or max(lo, round(60 / 196 * g * g))
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    rows, first = [], {}
    for i in range(n):
        for name, plan in (("random", random_mask(g * g, ratio, rng)),
                           ("block", block_mask(g, g, ratio, lo, hi, rng, args.aspect_min))):
            grid = plan.as_grid(g, g)
            first.setdefault(name, grid)
            rows.append({"strategy": name, "sample": i, "masked": plan.N_m,
                         "largest_component": largest_component(grid), "digest": plan.digest()})
    cell = args.cell
    gap = np.ones((g * cell, cell))
    side = np.concatenate([_mask_image(first["random"], cell), gap, _mask_image(first["block"], cell)], axis=1)
    write_pnm(out / "mask_viz.pgm", side)
    write_pnm(out / "random.pgm", _mask_image(first["random"], cell))
    write_pnm(out / "block.pgm", _mask_image(first["block"], cell))
    write_rows(rows, out / "components.csv", ("strategy", "sample", "masked", "largest_component", "digest"))
    summary = []
    for name in ("random", "block"):
        sizes = [r["largest_component"] for r in rows if r["strategy"] == name]
        summary.append({"strategy": name, "samples": n, "target_masked": masked_count(g * g, ratio),
                        "mean_largest_component": float(np.mean(sizes)),
                        "std_largest_component": float(np.std(sizes))})
    write_rows(summary, out / "summary.csv", tuple(summary[0]))
    for s in summary:
        print(f"{s['strategy']:>6}: mean largest component {s['mean_largest_component']:.2f}")
    return 0


_TARGETS = {"pixel": dict(lam=0.0, pixel_loss=True),
            "feature": dict(lam=1.0, pixel_loss=False),
            "both": dict(lam=1.0, pixel_loss=True)}


def cmd_ablate_mask(args) -> int:
    base = resolve_config(args)
    out = prepare_out(Path(args.out), args.overwrite)
    write_echo(base, out)
    train, test = load_data(base)
    targets = [t.strip() for t in args.targets.split(",")]
    for t in targets:
        if t not in _TARGETS:
            raise ConfigError(f"unknown target {t!r}; choose from {sorted(_TARGETS)}")
    rows, finite = [], True
    start = time.perf_counter()
    for target in targets:
        for strategy in ("random", "block"):
            cfg = base.replace(mask=strategy, **_TARGETS[target])
            t0 = time.perf_counter()
            state = engine.pretrain(train.images, engine.init_state(cfg))
            last = state.metrics[-1]
            row = {"target": target, "mask": strategy, "steps": state.step,
                   "final_L": last["L"], "final_L_R": last["L_R"], "final_L_P": last["L_P"],
                   "probe_top1": float("nan"), "seconds": time.perf_counter() - t0,
                   "plan_digest": state.plan_log[0] if state.plan_log else ""}
            if train.labels is not None and test is not None and test.labels is not None:
                row["probe_top1"] = linear_probe(state.model, train, test, cfg.train).metrics[-1]["top1"]
            finite &= all(math.isfinite(row[k]) for k in ("final_L", "final_L_R", "final_L_P"))
            rows.append(row)
            logger.info("%s/%s: L=%.4f in %.1fs", target, strategy, row["final_L"], row["seconds"])
    total = time.perf_counter() - start
    write_rows(rows, out / "ablation.csv", tuple(rows[0]))
    (out / "budget.txt").write_text(f"seconds = {total!r}\nbudget = {args.budget!r}\n")
    if total > args.budget:
        logger.warning("ablation took %.1fs, over the %.1fs budget", total, args.budget)
    if not finite:
        raise NumericError("a cell finished with a non-finite loss")
    return 0


# parser --------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, training: bool = True) -> None:
    p.add_argument("--config", metavar="PATH", help="flat key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--overwrite", action="store_true", help="replace an existing output directory")
    if training:
        p.add_argument("--epochs", type=int)
        p.add_argument("--mask", choices=("random", "block"))
        p.add_argument("--lambda", dest="lam", type=float, help="feature-loss weight")
        p.add_argument("--inject", choices=("on", "off", "low", "mid", "high"),
                       help="feature routing: on (low->regressor, high->predictor), off, "
                            "or the encoder tap fed to the regressor")
        p.add_argument("--ema-fraction", dest="ema_fraction", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bootmae", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    _common(p)
    p.add_argument("--resume", metavar="CKPT", help="continue from a pretraining checkpoint")
    p.set_defaults(func=cmd_pretrain)

    for name, func, helptext in (("finetune", cmd_finetune, "end-to-end fine-tuning"),
                                 ("probe", cmd_probe, "linear probing on frozen features")):
        p = sub.add_parser(name, help=helptext)
        _common(p, training=False)
        p.add_argument("--checkpoint", metavar="CKPT", help="pretraining checkpoint")
        if name == "finetune":
            p.add_argument("--resume", metavar="CKPT", help="continue from a fine-tuning checkpoint")
        else:
            p.set_defaults(resume=None)
        p.set_defaults(func=func)

    p = sub.add_parser("mask-viz", help="render random vs block-wise masks")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--overwrite", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--grid", type=int, default=14)
    p.add_argument("--ratio", type=float, default=0.75)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--min-block", type=int, default=0)
    p.add_argument("--max-block", type=int, default=0)
    p.add_argument("--aspect-min", type=float, default=0.3)
    p.add_argument("--cell", type=int, default=8, help="pixels per grid cell")
    p.set_defaults(func=cmd_mask_viz)

    p = sub.add_parser("ablate-mask", help="masking strategy x prediction target grid")
    _common(p)
    p.add_argument("--targets", default="pixel,feature", help="comma list of pixel, feature, both")
    p.add_argument("--budget", type=float, default=600.0, metavar="SECONDS")
    p.set_defaults(func=cmd_ablate_mask)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, OutputExists) as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"error: numeric: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, ImageFileError, ContractError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
