"""Small numpy layers with hand-written vector-Jacobian products."""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from ._grid import reflect_index


@lru_cache(maxsize=64)
def _conv_index(h: int, w: int, stride: int):
    ho, wo = -(-h // stride), -(-w // stride)
    taps = np.arange(3) - 1
    ri = reflect_index(np.arange(ho)[:, None] * stride + taps[None, :], h)  # (ho, 3)
    ci = reflect_index(np.arange(wo)[:, None] * stride + taps[None, :], w)  # (wo, 3)
    flat = ri[:, None, :, None] * w + ci[None, :, None, :]  # (ho, wo, 3, 3)
    return ri, ci, flat


def conv3x3(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int = 1):
    """3x3 convolution (cross-correlation) with 1-px reflection padding.

    ``x`` is (H, W, Cin), ``weight`` is (3, 3, Cin, Cout).  Output spatial size is
    ``ceil(H / stride) x ceil(W / stride)``.  Returns ``(out, cache)``.
    """
    h, w, cin = x.shape
    ri, ci, _ = _conv_index(h, w, stride)
    patches = x[ri[:, None, :, None], ci[None, :, None, :]]  # (ho, wo, 3, 3, cin)
    ho, wo = patches.shape[:2]
    cols = patches.reshape(ho * wo, 9 * cin)
    out = cols @ weight.reshape(9 * cin, -1) + bias
    return out.reshape(ho, wo, -1), (x.shape, cols, weight, stride)


def conv3x3_backward(dout: np.ndarray, cache, need_input: bool = True):
    shape, cols, weight, stride = cache
    h, w, cin = shape
    cout = weight.shape[-1]
    d2 = dout.reshape(-1, cout)
    d_weight = (cols.T @ d2).reshape(weight.shape)
    d_bias = d2.sum(axis=0)
    if not need_input:
        return None, d_weight, d_bias
    _, _, flat = _conv_index(h, w, stride)
    d_cols = d2 @ weight.reshape(9 * cin, cout).T  # (ho*wo, 9*cin)
    idx = (flat.reshape(-1, 1) * cin + np.arange(cin)).ravel()
    d_x = np.bincount(idx, weights=d_cols.ravel(), minlength=h * w * cin).reshape(h, w, cin)
    return d_x, d_weight, d_bias


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(w: np.ndarray, dw: np.ndarray, axis: int = -1) -> np.ndarray:
    return w * (dw - (w * dw).sum(axis=axis, keepdims=True))


def bilinear_coords(centers: np.ndarray, width: int, height: int, map_w: int, map_h: int):
    """Corner indices and fractions for sampling an (map_h, map_w) grid at pixel-space centers.

    Map cell ``j`` is centered on pixel coordinate ``(j + 0.5) * width / map_w``;
    samples outside the grid clamp to the border.
    """
    u = np.clip(centers[:, 0] * map_w / width - 0.5, 0.0, map_w - 1.0)
    v = np.clip(centers[:, 1] * map_h / height - 0.5, 0.0, map_h - 1.0)
    x0 = np.minimum(np.floor(u).astype(np.int64), max(map_w - 2, 0))
    y0 = np.minimum(np.floor(v).astype(np.int64), max(map_h - 2, 0))
    x1 = np.minimum(x0 + 1, map_w - 1)
    y1 = np.minimum(y0 + 1, map_h - 1)
    return x0, x1, y0, y1, u - x0, v - y0


def bilinear_sample(grid: np.ndarray, coords) -> np.ndarray:
    x0, x1, y0, y1, fx, fy = coords
    fx, fy = fx[:, None], fy[:, None]
    return (
        (1.0 - fx) * (1.0 - fy) * grid[y0, x0]
        + fx * (1.0 - fy) * grid[y0, x1]
        + (1.0 - fx) * fy * grid[y1, x0]
        + fx * fy * grid[y1, x1]
    )


def bilinear_sample_backward(dz: np.ndarray, coords, grid_shape) -> np.ndarray:
    x0, x1, y0, y1, fx, fy = coords
    fx, fy = fx[:, None], fy[:, None]
    hh, ww, k = grid_shape
    out = np.zeros((hh * ww, k))
    for yy, xx, wt in ((y0, x0, (1 - fx) * (1 - fy)), (y0, x1, fx * (1 - fy)), (y1, x0, (1 - fx) * fy), (y1, x1, fx * fy)):
        np.add.at(out, yy * ww + xx, wt * dz)
    return out.reshape(grid_shape)
