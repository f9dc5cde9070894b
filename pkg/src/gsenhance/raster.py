"""Tile-based alpha-blending rasterizer with an analytic backward pass.

Blending order is ascending primitive index.  Tiles are independent work
units (``prange``); every pixel belongs to exactly one tile and gradients are
accumulated into per-(tile, primitive) slots, then merged in fixed tile order,
so results are bit-identical for any thread count.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numba
import numpy as np
from numba import njit, prange

from .core import GaussianSet, conic_from_scale_rotation, sigmoid

if "NUMBA_THREADING_LAYER" not in os.environ:
    # the bundled TBB is too old and warns on first parallel launch
    numba.config.THREADING_LAYER = "omp"

ALPHA_CUTOFF = 1.0 / 255.0
T_MIN = 1e-4
CULL_SIGMA = 3.0


@dataclass(frozen=True)
class RasterSettings:
    alpha_cutoff: float = ALPHA_CUTOFF
    t_min: float = T_MIN
    cull_sigma: float = CULL_SIGMA


PRODUCTION = RasterSettings()
# no cutoff, no early stop, every primitive in every tile: matches render_reference
EXACT = RasterSettings(alpha_cutoff=0.0, t_min=0.0, cull_sigma=math.inf)


@dataclass
class TileIndex:
    """CSR layout: primitives of tile ``t`` are ``ids[offsets[t]:offsets[t+1]]``."""

    tile_px: int
    tiles_x: int
    tiles_y: int
    offsets: np.ndarray
    ids: np.ndarray

    @property
    def n_tiles(self) -> int:
        return self.tiles_x * self.tiles_y

    def tile_list(self, tx: int, ty: int) -> np.ndarray:
        t = ty * self.tiles_x + tx
        return self.ids[self.offsets[t] : self.offsets[t + 1]]


@dataclass
class GaussianGradients:
    d_mu: np.ndarray
    d_scale_raw: np.ndarray
    d_theta: np.ndarray
    d_color: np.ndarray
    d_opacity_raw: np.ndarray

    def to_flat(self) -> np.ndarray:
        return np.concatenate(
            [self.d_mu.ravel(), self.d_scale_raw.ravel(), self.d_theta.ravel(), self.d_color.ravel(), self.d_opacity_raw.ravel()]
        )


def set_threads(n: int | None) -> None:
    if n is None:
        return
    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


@njit(cache=True)
def _bin_tiles(mu, radius, width, height, tile, tiles_x, tiles_y, full):
    n = mu.shape[0]
    n_tiles = tiles_x * tiles_y
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    lo = np.zeros((n, 2), dtype=np.int64)
    hi = np.full((n, 2), -1, dtype=np.int64)
    for i in range(n):
        if full:
            lo[i, 0], lo[i, 1] = 0, 0
            hi[i, 0], hi[i, 1] = tiles_x - 1, tiles_y - 1
        else:
            r = radius[i]
            xmin, xmax = mu[i, 0] - r, mu[i, 0] + r
            ymin, ymax = mu[i, 1] - r, mu[i, 1] + r
            if xmax < 0.0 or ymax < 0.0 or xmin >= width or ymin >= height:
                continue
            lo[i, 0] = max(0, int(math.floor(xmin / tile)))
            lo[i, 1] = max(0, int(math.floor(ymin / tile)))
            hi[i, 0] = min(tiles_x - 1, int(math.floor(xmax / tile)))
            hi[i, 1] = min(tiles_y - 1, int(math.floor(ymax / tile)))
        for ty in range(lo[i, 1], hi[i, 1] + 1):
            for tx in range(lo[i, 0], hi[i, 0] + 1):
                counts[ty * tiles_x + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    ids = np.empty(offsets[-1], dtype=np.int64)
    # primitives visited in ascending order, so each tile list is sorted
    for i in range(n):
        for ty in range(lo[i, 1], hi[i, 1] + 1):
            for tx in range(lo[i, 0], hi[i, 0] + 1):
                t = ty * tiles_x + tx
                ids[fill[t]] = i
                fill[t] += 1
    return offsets, ids


def build_tiles(gs: GaussianSet, tile_px: int = 16, cull_sigma: float = CULL_SIGMA) -> TileIndex:
    if tile_px < 1:
        raise ValueError(f"tile_px must be >= 1, got {tile_px}")
    tiles_x = max(1, -(-gs.width // tile_px))
    tiles_y = max(1, -(-gs.height // tile_px))
    full = not math.isfinite(cull_sigma)
    radius = cull_sigma * gs.scales().max(axis=1) if gs.count and not full else np.zeros(gs.count)
    offsets, ids = _bin_tiles(gs.mu, radius, float(gs.width), float(gs.height), tile_px, tiles_x, tiles_y, full)
    return TileIndex(tile_px, tiles_x, tiles_y, offsets, ids)


# no ninf/nnan: exact mode relies on -inf thresholds
_FASTMATH = {"contract", "afn", "arcp", "nsz"}


@njit(cache=True, fastmath=_FASTMATH)
def _gather(start, end, ids, mu, conic, color, opac, pmin):
    """Tile-local copy of per-primitive data: mu(2), conic(3), opacity, power threshold, color(3)."""
    loc = np.empty((end - start, 10))
    for e in range(end - start):
        i = ids[start + e]
        loc[e, 0] = mu[i, 0]
        loc[e, 1] = mu[i, 1]
        loc[e, 2] = conic[i, 0]
        loc[e, 3] = conic[i, 1]
        loc[e, 4] = conic[i, 2]
        loc[e, 5] = opac[i]
        loc[e, 6] = pmin[i]
        loc[e, 7] = color[i, 0]
        loc[e, 8] = color[i, 1]
        loc[e, 9] = color[i, 2]
    return loc


@njit(parallel=True, cache=True, fastmath=_FASTMATH)
def _render_kernel(offsets, ids, mu, conic, color, opac, pmin, width, height, tile, tiles_x, t_min, out):
    n_tiles = offsets.shape[0] - 1
    for t in prange(n_tiles):
        x0 = (t % tiles_x) * tile
        y0 = (t // tiles_x) * tile
        x1 = min(x0 + tile, width)
        y1 = min(y0 + tile, height)
        loc = _gather(offsets[t], offsets[t + 1], ids, mu, conic, color, opac, pmin)
        n_loc = loc.shape[0]
        for py in range(y0, y1):
            fy = py + 0.5
            for px in range(x0, x1):
                fx = px + 0.5
                trans = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                for e in range(n_loc):
                    dx = fx - loc[e, 0]
                    dy = fy - loc[e, 1]
                    power = -0.5 * (loc[e, 2] * dx * dx + 2.0 * loc[e, 3] * dx * dy + loc[e, 4] * dy * dy)
                    if power < loc[e, 6]:
                        continue
                    alpha = loc[e, 5] * math.exp(power)
                    w = alpha * trans
                    r += loc[e, 7] * w
                    g += loc[e, 8] * w
                    b += loc[e, 9] * w
                    trans *= 1.0 - alpha
                    if trans < t_min:
                        break
                out[py, px, 0] = r
                out[py, px, 1] = g
                out[py, px, 2] = b


@njit(parallel=True, cache=True, fastmath=_FASTMATH)
def _backward_kernel(
    offsets, ids, mu, conic, color, opac, pmin, width, height, tile, tiles_x, t_min, grad, geometry, buf
):
    n_tiles = offsets.shape[0] - 1
    for t in prange(n_tiles):
        x0 = (t % tiles_x) * tile
        y0 = (t // tiles_x) * tile
        x1 = min(x0 + tile, width)
        y1 = min(y0 + tile, height)
        start = offsets[t]
        loc = _gather(start, offsets[t + 1], ids, mu, conic, color, opac, pmin)
        n_loc = loc.shape[0]
        used = np.empty(n_loc, dtype=np.int64)
        gval = np.empty(n_loc)
        tval = np.empty(n_loc)
        for py in range(y0, y1):
            fy = py + 0.5
            for px in range(x0, x1):
                fx = px + 0.5
                gr = grad[py, px, 0]
                gg = grad[py, px, 1]
                gb = grad[py, px, 2]
                if gr == 0.0 and gg == 0.0 and gb == 0.0:
                    continue
                # recompute the forward blend for this pixel
                trans = 1.0
                k = 0
                for e in range(n_loc):
                    dx = fx - loc[e, 0]
                    dy = fy - loc[e, 1]
                    power = -0.5 * (loc[e, 2] * dx * dx + 2.0 * loc[e, 3] * dx * dy + loc[e, 4] * dy * dy)
                    if power < loc[e, 6]:
                        continue
                    gauss = math.exp(power)
                    used[k] = e
                    gval[k] = gauss
                    tval[k] = trans
                    k += 1
                    trans *= 1.0 - loc[e, 5] * gauss
                    if trans < t_min:
                        break
                # reverse sweep; (rr, rg, rb) is the color composited behind the current primitive
                rr = 0.0
                rg = 0.0
                rb = 0.0
                for j in range(k - 1, -1, -1):
                    e = used[j]
                    gauss = gval[j]
                    alpha = loc[e, 5] * gauss
                    tr = tval[j]
                    w = alpha * tr
                    cr = loc[e, 7]
                    cg = loc[e, 8]
                    cb = loc[e, 9]
                    slot = start + e
                    buf[slot, 5] += gr * w
                    buf[slot, 6] += gg * w
                    buf[slot, 7] += gb * w
                    d_alpha = tr * (gr * (cr - rr) + gg * (cg - rg) + gb * (cb - rb))
                    buf[slot, 8] += d_alpha * gauss
                    if geometry:
                        d_power = d_alpha * alpha
                        dx = fx - loc[e, 0]
                        dy = fy - loc[e, 1]
                        buf[slot, 0] += d_power * (loc[e, 2] * dx + loc[e, 3] * dy)
                        buf[slot, 1] += d_power * (loc[e, 3] * dx + loc[e, 4] * dy)
                        buf[slot, 2] += d_power * (-0.5 * dx * dx)
                        buf[slot, 3] += d_power * (-dx * dy)
                        buf[slot, 4] += d_power * (-0.5 * dy * dy)
                    rr = cr * alpha + (1.0 - alpha) * rr
                    rg = cg * alpha + (1.0 - alpha) * rg
                    rb = cb * alpha + (1.0 - alpha) * rb


@njit(cache=True)
def _merge(ids, buf, n):
    out = np.zeros((n, buf.shape[1]))
    for e in range(ids.shape[0]):
        i = ids[e]
        for j in range(buf.shape[1]):
            out[i, j] += buf[e, j]
    return out


def _prepare(gs: GaussianSet, alpha_cutoff: float):
    scales = gs.scales()
    conic = conic_from_scale_rotation(scales, gs.theta) if gs.count else np.zeros((0, 3))
    opac = gs.opacities()
    # alpha < cutoff  <=>  power < log(cutoff / opacity); lets the kernels skip exp()
    if alpha_cutoff > 0.0:
        with np.errstate(divide="ignore"):
            pmin = np.log(alpha_cutoff) - np.log(opac)
    else:
        pmin = np.full(gs.count, -np.inf)
    return scales, np.ascontiguousarray(conic), np.ascontiguousarray(gs.color), opac, pmin


def render(
    gs: GaussianSet, tile_px: int = 16, settings: RasterSettings = PRODUCTION, tiles: TileIndex | None = None
) -> np.ndarray:
    """Alpha-blend the set into an (H, W, 3) image; uncovered pixels are black."""
    if tile_px < 1:
        raise ValueError(f"tile_px must be >= 1, got {tile_px}")
    out = np.zeros((gs.height, gs.width, 3))
    if gs.count == 0 or out.size == 0:
        return out
    if tiles is None:
        tiles = build_tiles(gs, tile_px, settings.cull_sigma)
    _, conic, color, opac, pmin = _prepare(gs, settings.alpha_cutoff)
    _render_kernel(
        tiles.offsets, tiles.ids, np.ascontiguousarray(gs.mu), conic, color, opac, pmin,
        gs.width, gs.height, tiles.tile_px, tiles.tiles_x, settings.t_min, out,
    )
    return out


def render_reference(gs: GaussianSet) -> np.ndarray:
    """Brute-force blend over every primitive in index order; no tiling, no cutoffs."""
    h, w = gs.height, gs.width
    out = np.zeros((h, w, 3))
    if gs.count == 0 or out.size == 0:
        return out
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    xs += 0.5
    ys += 0.5
    trans = np.ones((h, w))
    conic = conic_from_scale_rotation(gs.scales(), gs.theta)
    opac = gs.opacities()
    for i in range(gs.count):
        dx = xs - gs.mu[i, 0]
        dy = ys - gs.mu[i, 1]
        a, b, c = conic[i]
        alpha = opac[i] * np.exp(-0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy))
        out += (alpha * trans)[..., None] * gs.color[i]
        trans = trans * (1.0 - alpha)
    return out


def backward(
    gs: GaussianSet,
    tiles: TileIndex,
    grad_image: np.ndarray,
    freeze_geometry: bool = False,
    settings: RasterSettings = PRODUCTION,
) -> GaussianGradients:
    """Gradient of ``sum(grad_image * render(gs))`` w.r.t. every raw parameter."""
    grad_image = np.ascontiguousarray(grad_image, dtype=np.float64)
    if grad_image.shape != (gs.height, gs.width, 3):
        raise ValueError(f"grad_image shape {grad_image.shape} does not match viewport {(gs.height, gs.width, 3)}")
    n = gs.count
    if n == 0:
        z = np.zeros((0,))
        return GaussianGradients(z.reshape(0, 2), z.reshape(0, 2), z, z.reshape(0, 3), z)
    scales, conic, color, opac, pmin = _prepare(gs, settings.alpha_cutoff)
    buf = np.zeros((tiles.ids.shape[0], 9))
    _backward_kernel(
        tiles.offsets, tiles.ids, np.ascontiguousarray(gs.mu), conic, color, opac, pmin,
        gs.width, gs.height, tiles.tile_px, tiles.tiles_x, settings.t_min,
        grad_image, not freeze_geometry, buf,
    )
    g = _merge(tiles.ids, buf, n)

    d_color = g[:, 5:8].copy()
    d_opacity_raw = g[:, 8] * opac * (1.0 - opac)
    if freeze_geometry:
        return GaussianGradients(np.zeros((n, 2)), np.zeros((n, 2)), np.zeros(n), d_color, d_opacity_raw)

    d_a, d_b, d_c = g[:, 2], g[:, 3], g[:, 4]
    cos, sin = np.cos(gs.theta), np.sin(gs.theta)
    cc, ss, cs = cos * cos, sin * sin, cos * sin
    ix, iy = 1.0 / scales[:, 0] ** 2, 1.0 / scales[:, 1] ** 2
    d_ix = d_a * cc + d_b * cs + d_c * ss
    d_iy = d_a * ss - d_b * cs + d_c * cc
    d_theta = (ix - iy) * (-2.0 * cs * d_a + (cc - ss) * d_b + 2.0 * cs * d_c)
    d_scale = np.stack([d_ix * (-2.0 / scales[:, 0] ** 3), d_iy * (-2.0 / scales[:, 1] ** 3)], axis=1)
    d_scale_raw = d_scale * sigmoid(gs.scale_raw)
    return GaussianGradients(g[:, 0:2].copy(), d_scale_raw, d_theta, d_color, d_opacity_raw)
