"""TVT1 binary tensor container.

Layout (all little-endian): the 4 magic bytes ``TVT1``, a u32 dtype tag
(0 = float32, 1 = float64), a u32 rank, ``rank`` u64 dimensions, then the raw
row-major payload.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TVT1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def dumps(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in _TAGS:
        arr = arr.astype(np.float64)
    tag = _TAGS[arr.dtype]
    header = MAGIC + struct.pack("<II", tag, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()


def loads(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise ValueError("not a TVT1 tensor file")
    tag, rank = struct.unpack_from("<II", buf, 4)
    if tag not in _DTYPES:
        raise ValueError(f"unknown TVT1 dtype tag {tag}")
    dims = struct.unpack_from(f"<{rank}Q", buf, 12)
    off = 12 + 8 * rank
    dt = _DTYPES[tag]
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) - off != count * dt.itemsize:
        raise ValueError("TVT1 payload length does not match header")
    return np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(dims).astype(dt.newbyteorder("="))


def save(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(dumps(arr))


def load(path: str | Path) -> np.ndarray:
    return loads(Path(path).read_bytes())
