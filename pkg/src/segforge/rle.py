"""Run-length encoding of binary masks over row-major order.

Counts alternate background/foreground runs, always starting with
background (a leading foreground pixel yields a zero first count). Exact
and language-neutral; the browser client carries a matching decoder.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError


def rle_encode(mask: np.ndarray) -> dict:
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValidationError("RLE masks must be 2D")
    flat = mask.ravel()
    counts: list[int] = []
    if flat.size == 0:
        return {"counts": [], "shape": list(mask.shape)}
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    boundaries = np.concatenate([[0], changes, [flat.size]])
    runs = np.diff(boundaries).tolist()
    if flat[0]:
        counts.append(0)
    counts.extend(int(r) for r in runs)
    return {"counts": counts, "shape": list(mask.shape)}


def rle_decode(payload: dict) -> np.ndarray:
    shape = tuple(payload["shape"])
    counts = payload["counts"]
    total = int(np.prod(shape)) if shape else 0
    if sum(counts) != total:
        raise ValidationError(f"RLE counts sum {sum(counts)} != {total} pixels")
    flat = np.zeros(total, dtype=bool)
    pos = 0
    value = False
    for count in counts:
        if value:
            flat[pos : pos + count] = True
        pos += count
        value = not value
    return flat.reshape(shape)


def rle_foreground(payload: dict) -> int:
    """Foreground pixel count straight from the run lengths."""
    return int(sum(payload["counts"][1::2]))
