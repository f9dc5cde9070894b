"""Reflection-padding index helpers shared by the Sobel loss and the encoder convolutions."""
from __future__ import annotations

import numpy as np


def reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    """Map possibly out-of-range indices into ``[0, n)`` by mirror reflection (edge excluded)."""
    idx = np.asarray(idx, dtype=np.int64)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def pad_reflect(x: np.ndarray, p: int = 1) -> np.ndarray:
    h, w = x.shape[:2]
    ri = reflect_index(np.arange(-p, h + p), h)
    ci = reflect_index(np.arange(-p, w + p), w)
    return x[ri][:, ci]


def pad_reflect_t(g: np.ndarray, shape, p: int = 1) -> np.ndarray:
    """Adjoint of :func:`pad_reflect`: fold padded gradients back onto the source pixels."""
    h, w = shape[:2]
    ri = reflect_index(np.arange(-p, h + p), h)
    ci = reflect_index(np.arange(-p, w + p), w)
    rows = np.zeros((h,) + g.shape[1:])
    np.add.at(rows, ri, g)
    out = np.zeros((h, w) + g.shape[2:])
    np.add.at(out, (slice(None), ci), rows)
    return out
