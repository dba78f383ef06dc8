"""Synthetic procedural datasets, PPM/PGM I/O and augmentation."""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .exceptions import ContractError, ImageFileError

PATTERNS = ("hstripes", "vstripes", "checker", "rings", "crosshatch", "blobs")


@dataclass
class Dataset:
    images: np.ndarray                      # [n, H, W, C], float32
    labels: Optional[np.ndarray] = None     # [n] class ids 0..K-1
    split: str = "train"
    names: List[str] = field(default_factory=list)
    mean: Optional[np.ndarray] = None       # per-channel statistics used to standardize
    std: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ContractError(f"images must be [n, H, W, C], got {self.images.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.images),):
                raise ContractError("one label per image is required")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def num_classes(self) -> int:
        return 0 if self.labels is None else int(self.labels.max()) + 1


@dataclass(frozen=True)
class SynthSpec:
    """Procedural classes, one pattern family per class (see ``PATTERNS``).

    All families are invariant under horizontal flips and translations, so
    crop / flip augmentation never changes the label.
    """

    num_classes: int = 4
    n: int = 64
    img_size: int = 16
    channels: int = 3
    noise: float = 0.1
    split: str = "train"


def _pattern(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    period = rng.uniform(3.0, 6.0)
    phase = rng.uniform(0, 2 * np.pi)
    k = 2 * np.pi / period
    if kind == "hstripes":
        return np.sin(k * yy + phase)
    if kind == "vstripes":
        return np.sin(k * xx + phase)
    if kind == "checker":
        return np.sin(k * yy + phase) * np.sin(k * xx + rng.uniform(0, 2 * np.pi)) * 2
    if kind == "rings":
        cy, cx = rng.uniform(0, size, 2)
        return np.sin(k * np.hypot(yy - cy, xx - cx) + phase)
    if kind == "crosshatch":
        return 0.5 * (np.sin(k * (xx + yy) + phase) + np.sin(k * (xx - yy) + rng.uniform(0, 2 * np.pi)))
    if kind == "blobs":
        out = -np.ones((size, size))
        for cy, cx in rng.uniform(0, size, (3, 2)):
            out += 2 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * rng.uniform(1.0, 2.0) ** 2))
        return np.clip(out, -1, 1)
    raise ValueError(kind)


def synth_dataset(spec: SynthSpec = SynthSpec(), seed: int = 0) -> Dataset:
    """Deterministic labelled images in ``[0, 1]`` with balanced classes."""
    if not 1 <= spec.num_classes <= len(PATTERNS):
        raise ValueError(f"num_classes must lie in [1, {len(PATTERNS)}]")
    rng = np.random.default_rng(seed)
    labels = np.arange(spec.n) % spec.num_classes
    rng.shuffle(labels)
    images = np.empty((spec.n, spec.img_size, spec.img_size, spec.channels), dtype=np.float32)
    for i, label in enumerate(labels):
        pat = _pattern(PATTERNS[label], spec.img_size, rng)
        tint = rng.uniform(0.3, 1.0, spec.channels)
        base = rng.uniform(0.35, 0.65)
        contrast = rng.uniform(0.2, 0.35)
        img = base + contrast * pat[..., None] * tint
        img += spec.noise * rng.standard_normal(img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels, spec.split)


def train_test(num_classes: int, n_train: int, n_test: int, img_size: int, channels: int,
               seed: int = 0) -> Tuple[Dataset, Dataset]:
    train = synth_dataset(SynthSpec(num_classes, n_train, img_size, channels), seed=2 * seed)
    test = synth_dataset(SynthSpec(num_classes, n_test, img_size, channels, split="test"), seed=2 * seed + 1)
    return train, test


# augmentation ----------------------------------------------------------------

def augment(images: np.ndarray, rng: np.random.Generator, jitter: int) -> np.ndarray:
    """Pad-and-crop by up to ``jitter`` pixels and random horizontal flips."""
    n, H, W, _ = images.shape
    out = np.empty_like(images)
    padded = np.pad(images, ((0, 0), (jitter, jitter), (jitter, jitter), (0, 0)), mode="reflect")
    offsets = rng.integers(0, 2 * jitter + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    for i in range(n):
        dy, dx = offsets[i]
        crop = padded[i, dy:dy + H, dx:dx + W]
        out[i] = crop[:, ::-1] if flips[i] else crop
    return out


# PPM / PGM -----------------------------------------------------------------

_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*(\S+)")


def write_pnm(path, image: np.ndarray) -> None:
    """Write ``[H, W]``, ``[H, W, 1]`` (P5) or ``[H, W, 3]`` (P6) values in ``[0, 1]``."""
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot write image of shape {img.shape} as PPM/PGM")
    data = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    H, W = data.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (W, H) + data.tobytes())


def read_pnm(path) -> np.ndarray:
    """Read a binary PGM/PPM file as ``[H, W, C]`` floats in ``[0, 1]``."""
    path = Path(path)
    buf = path.read_bytes()
    pos, fields_ = 0, []
    for _ in range(4):
        m = _TOKEN.match(buf, pos)
        if not m:
            raise ImageFileError(f"{path.name}: malformed header")
        fields_.append(m.group(1))
        pos = m.end()
    magic = fields_[0]
    if magic not in (b"P5", b"P6"):
        raise ImageFileError(f"{path.name}: unsupported magic {magic!r}")
    try:
        W, H, maxval = (int(v) for v in fields_[1:])
    except ValueError:
        raise ImageFileError(f"{path.name}: malformed header") from None
    if not (0 < maxval < 65536) or W <= 0 or H <= 0:
        raise ImageFileError(f"{path.name}: malformed header")
    C = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    pos += 1  # single whitespace byte after maxval
    need = H * W * C * dtype.itemsize
    raw = buf[pos:pos + need]
    if len(raw) != need:
        raise ImageFileError(f"{path.name}: expected {need} data bytes, found {len(raw)}")
    arr = np.frombuffer(raw, dtype=dtype).reshape(H, W, C)
    return arr.astype(np.float32) / maxval


def standardize(images: np.ndarray, mean=None, std=None, eps: float = 1e-6):
    """Per-channel standardization; returns ``(images, mean, std)``."""
    if mean is None:
        mean = images.mean(axis=(0, 1, 2))
        std = np.sqrt(images.var(axis=(0, 1, 2)) + eps)
    return ((images - mean) / std).astype(np.float32), mean, std


def load_images(directory, standardize_channels: bool = True) -> Dataset:
    """Load every ``.pgm`` / ``.ppm`` file in ``directory`` (sorted by name).

    An optional ``labels.csv`` with ``filename,class`` rows supplies labels;
    it must then cover every image.
    """
    directory = Path(directory)
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in (".pgm", ".ppm"))
    if not files:
        raise ImageFileError(f"{directory}: no PGM/PPM files")
    images = [read_pnm(p) for p in files]
    shapes: Dict[tuple, List[str]] = {}
    for p, img in zip(files, images):
        shapes.setdefault(img.shape, []).append(p.name)
    if len(shapes) > 1:
        listing = "; ".join(f"{s}: {', '.join(names)}" for s, names in shapes.items())
        raise ImageFileError(f"{directory}: mixed image extents ({listing})")
    stack = np.stack(images)
    labels = None
    label_file = directory / "labels.csv"
    if label_file.exists():
        table = {}
        with open(label_file, newline="") as f:
            for row in csv.reader(f):
                if not row or row[0].strip().lower() == "filename":
                    continue
                table[row[0].strip()] = int(row[1])
        missing = [p.name for p in files if p.name not in table]
        if missing:
            raise ImageFileError(f"{label_file}: no label for {', '.join(missing)}")
        labels = np.array([table[p.name] for p in files])
        absent = sorted(set(range(int(labels.max()) + 1)) - set(labels.tolist()))
        if labels.min() < 0 or absent:
            raise ImageFileError(f"{label_file}: class ids must cover 0..K-1 densely"
                                 + (f"; missing {absent}" if absent else ""))
    mean = std = None
    if standardize_channels:
        stack, mean, std = standardize(stack)
    return Dataset(stack, labels, names=[p.name for p in files], mean=mean, std=std)


def save_dataset(dataset: Dataset, directory) -> None:
    """Write images (expected in ``[0, 1]``) and ``labels.csv`` to ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ext = ".ppm" if dataset.images.shape[-1] == 3 else ".pgm"
    names = []
    for i, img in enumerate(dataset.images):
        name = f"img_{i:05d}{ext}"
        write_pnm(directory / name, img)
        names.append(name)
    if dataset.labels is not None:
        with open(directory / "labels.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["filename", "class"])
            w.writerows(zip(names, dataset.labels.tolist()))
