"""Uncompressed run-length encoding of binary masks.

A mask of shape (H, W) is flattened in row-major order; each foreground run
is stored as ``[start, length]`` where ``start`` is the flat index of its
first pixel.  Runs are sorted, non-overlapping and non-adjacent.  The JSON
form is ``{"size": [H, W], "runs": [[start, length], ...]}``.
"""

from __future__ import annotations

import numpy as np


def encode(mask: np.ndarray) -> dict:
    m = np.asarray(mask, dtype=bool)
    flat = m.reshape(-1).astype(np.int8)
    edges = np.diff(np.concatenate([[0], flat, [0]]))
    starts = np.nonzero(edges == 1)[0]
    ends = np.nonzero(edges == -1)[0]
    return {"size": [int(m.shape[0]), int(m.shape[1])],
            "runs": [[int(s), int(e - s)] for s, e in zip(starts, ends)]}


def decode(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    flat = np.zeros(h * w, dtype=bool)
    for start, length in rle["runs"]:
        flat[start:start + length] = True
    return flat.reshape(h, w)


def area(rle: dict) -> int:
    return int(sum(length for _, length in rle["runs"]))
