"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"BMAECKPT"  u32 version  u64 header_len  header (UTF-8 JSON)
    repeated:  u32 name_len  name  u32 ndim  u64 * ndim dims  float32 data

The JSON header holds the configuration echo, counters, RNG state and the
number of array entries. Arrays are stored as little-endian float32.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple

import numpy as np

from .exceptions import CheckpointError

MAGIC = b"BMAECKPT"
VERSION = 1


def write_container(path, header: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> None:
    meta = dict(header, version=VERSION, n_arrays=len(arrays))
    blob = json.dumps(meta, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC + struct.pack("<IQ", VERSION, len(blob)) + blob)
        for name, arr in arrays.items():
            key = name.encode()
            arr = np.ascontiguousarray(arr, dtype="<f4")
            f.write(struct.pack("<I", len(key)) + key + struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_container(path) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(buf, path)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = r.unpack("<IQ", "header length")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(r.take(hlen, "header").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(int(header.get("n_arrays", 0))):
        (klen,) = r.unpack("<I", "entry name length")
        name = r.take(klen, "entry name").decode()
        (ndim,) = r.unpack("<I", f"rank of {name}")
        shape = r.unpack(f"<{ndim}Q", f"shape of {name}")
        count = int(np.prod(shape)) if ndim else 1
        data = r.take(4 * count, f"data of {name}")
        arrays[name] = np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - r.pos} trailing bytes")
    return header, arrays


def check_shapes(expected: Mapping[str, tuple], arrays: Mapping[str, np.ndarray], path) -> None:
    """Raise listing every missing, unexpected or misshapen entry."""
    problems = []
    for name, shape in expected.items():
        if name not in arrays:
            problems.append(f"missing {name}")
        elif tuple(arrays[name].shape) != tuple(shape):
            problems.append(f"{name}: stored {arrays[name].shape}, expected {tuple(shape)}")
    problems += [f"unexpected {n}" for n in arrays if n not in expected]
    if problems:
        raise CheckpointError(f"{path}: incompatible arrays: " + "; ".join(problems))
