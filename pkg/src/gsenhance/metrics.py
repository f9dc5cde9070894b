"""Image quality metrics: PSNR, SSIM, MS-SSIM (with gradient), DE, EME, LOE, compression ratio."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LUMA = np.array([0.299, 0.587, 0.114])

WIN_SIZE = 11
WIN_SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2
MS_WEIGHTS = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])
# contrast-structure means below this are treated as zero (no gradient)
CS_FLOOR = 1e-6


def to_luma(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.shape[-1] == 1:
        return img[..., 0]
    return img @ LUMA


def _luma_vjp(g: np.ndarray, shape) -> np.ndarray:
    if len(shape) == 2:
        return g
    if shape[-1] == 1:
        return g[..., None]
    return g[..., None] * LUMA


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = WIN_SIZE, sigma: float = WIN_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _window_for(min_side: int) -> np.ndarray:
    if min_side >= WIN_SIZE:
        return gaussian_window()
    # shrink the window (odd size) for images smaller than 11 px
    size = min_side if min_side % 2 else min_side - 1
    size = max(size, 1)
    return gaussian_window(size, WIN_SIGMA * size / WIN_SIZE)


def _filt(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """'valid' separable correlation."""
    k = g.shape[0]
    x = sliding_window_view(x, k, axis=0) @ g
    return sliding_window_view(x, k, axis=1) @ g


def _filt_t(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`_filt`: 'full' convolution back onto the input grid."""
    k = g.shape[0]
    gf = g[::-1]
    y = np.pad(y, ((0, 0), (k - 1, k - 1)))
    y = sliding_window_view(y, k, axis=1) @ gf
    y = np.pad(y, ((k - 1, k - 1), (0, 0)))
    return sliding_window_view(y, k, axis=0) @ gf


def _pool(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[0] // 2 * 2, x.shape[1] // 2 * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def _pool_t(g: np.ndarray, shape) -> np.ndarray:
    out = np.zeros(shape)
    h, w = g.shape[0] * 2, g.shape[1] * 2
    out[:h, :w] = 0.25 * np.repeat(np.repeat(g, 2, axis=0), 2, axis=1)
    return out


class _SsimMaps:
    """Local statistics of one scale, kept for the backward pass."""

    def __init__(self, x: np.ndarray, y: np.ndarray, g: np.ndarray):
        self.x, self.y, self.g = x, y, g
        self.mx = _filt(x, g)
        self.my = _filt(y, g)
        self.sxx = _filt(x * x, g) - self.mx * self.mx
        self.syy = _filt(y * y, g) - self.my * self.my
        self.sxy = _filt(x * y, g) - self.mx * self.my
        self.l_den = self.mx * self.mx + self.my * self.my + C1
        self.l = (2.0 * self.mx * self.my + C1) / self.l_den
        self.cs_den = self.sxx + self.syy + C2
        self.cs = (2.0 * self.sxy + C2) / self.cs_den

    def backward(self, g_l: np.ndarray | None, g_cs: np.ndarray) -> np.ndarray:
        g_sxy = g_cs * 2.0 / self.cs_den
        g_sxx = -g_cs * self.cs / self.cs_den
        g_mx = -2.0 * self.mx * g_sxx - self.my * g_sxy
        if g_l is not None:
            g_mx = g_mx + g_l * (2.0 * self.my - 2.0 * self.mx * self.l) / self.l_den
        ft = _filt_t
        return ft(g_mx, self.g) + 2.0 * self.x * ft(g_sxx, self.g) + self.y * ft(g_sxy, self.g)


def n_scales(height: int, width: int, max_scales: int = 5) -> int:
    m = min(height, width)
    s = 1
    while s < max_scales and m >= WIN_SIZE * 2**s:
        s += 1
    return s


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM of the luminance channels (11x11 Gaussian window, sigma 1.5)."""
    x, y = to_luma(a), to_luma(b)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    maps = _SsimMaps(x, y, _window_for(min(x.shape)))
    return float(np.mean(maps.l * maps.cs))


def ms_ssim(a: np.ndarray, b: np.ndarray, return_grad: bool = False):
    """Multi-scale SSIM on luminance.  With ``return_grad`` also returns d/d``a``.

    Scales are dropped (weights renormalized) when the image is smaller than
    ``11 * 2**(scales-1)`` on a side.
    """
    a = np.asarray(a, dtype=np.float64)
    x, y = to_luma(a), to_luma(b)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    levels = n_scales(*x.shape)
    weights = MS_WEIGHTS[:levels] / MS_WEIGHTS[:levels].sum()
    g = _window_for(min(x.shape))

    maps, shapes, values = [], [], []
    for j in range(levels):
        if j:
            x, y = _pool(x), _pool(y)
        m = _SsimMaps(x, y, g)
        maps.append(m)
        shapes.append(x.shape)
        values.append(float(np.mean(m.l * m.cs)) if j == levels - 1 else float(np.mean(m.cs)))
    clipped = np.maximum(values, CS_FLOOR)
    score = float(np.prod(clipped**weights))
    if not return_grad:
        return score

    grad = None
    for j in range(levels - 1, -1, -1):
        m = maps[j]
        dv = score * weights[j] / clipped[j] if values[j] > CS_FLOOR else 0.0
        dmap = dv / m.cs.size
        if j == levels - 1:
            gx = m.backward(np.full(m.l.shape, dmap) * m.cs, np.full(m.l.shape, dmap) * m.l)
        else:
            gx = m.backward(None, np.full(m.cs.shape, dmap))
        if grad is not None:
            gx = gx + _pool_t(grad, shapes[j])
        grad = gx
    return score, _luma_vjp(grad, a.shape)


def discrete_entropy(img: np.ndarray) -> float:
    """Shannon entropy (bits) of the 256-bin histogram of 8-bit luminance."""
    q = np.floor(np.clip(to_luma(img), 0.0, 1.0) * 255.0 + 0.5).astype(np.int64)
    hist = np.bincount(q.ravel(), minlength=256).astype(np.float64)
    p = hist[hist > 0] / hist.sum()
    return float(max(0.0, -(p * np.log2(p)).sum()))


def eme(img: np.ndarray, block_px: int = 8, eps: float = 1e-4) -> float:
    """Mean over non-overlapping blocks of ``20 log10((max + eps) / (min + eps))`` on luminance clipped to [0, 1]."""
    y = np.clip(to_luma(img), 0.0, 1.0)
    h, w = y.shape
    by, bx = h // block_px, w // block_px
    if by == 0 or bx == 0:
        blocks = y.reshape(1, 1, -1)
    else:
        blocks = y[: by * block_px, : bx * block_px].reshape(by, block_px, bx, block_px).transpose(0, 2, 1, 3)
        blocks = blocks.reshape(by, bx, -1)
    vmax, vmin = blocks.max(axis=-1), blocks.min(axis=-1)
    return float(np.mean(20.0 * np.log10((vmax + eps) / (vmin + eps))))


def loe(enh: np.ndarray, orig: np.ndarray, max_side: int = 100) -> float:
    """Lightness-order error x100: fraction of pixel pairs whose lightness order flips."""
    enh = np.asarray(enh, dtype=np.float64)
    orig = np.asarray(orig, dtype=np.float64)
    if enh.shape != orig.shape:
        raise ValueError(f"shape mismatch {enh.shape} vs {orig.shape}")
    ue = enh.max(axis=-1) if enh.ndim == 3 else enh
    uo = orig.max(axis=-1) if orig.ndim == 3 else orig
    step = max(1, math.ceil(max(ue.shape) / max_side))
    ue = ue[::step, ::step].ravel()
    uo = uo[::step, ::step].ravel()
    n = ue.size
    flips = 0
    chunk = max(1, 2_000_000 // n)
    for s in range(0, n, chunk):
        e = ue[s : s + chunk, None] >= ue[None, :]
        o = uo[s : s + chunk, None] >= uo[None, :]
        flips += int(np.count_nonzero(e ^ o))
    return 100.0 * flips / (n * n)


def compression_ratio(width: int, height: int, n: int) -> float:
    """Pixel degrees of freedom (3HW) over Gaussian degrees of freedom (9N)."""
    if n <= 0:
        raise ValueError(f"primitive count must be positive, got {n}")
    return width * height / (3.0 * n)


@dataclass
class MetricReport:
    psnr: float | None = None
    ssim: float | None = None
    ms_ssim: float | None = None
    de: float | None = None
    eme: float | None = None
    loe: float | None = None

    def computed(self) -> list[str]:
        return [k for k, v in asdict(self).items() if v is not None]

    def to_json(self) -> str:
        # JSON has no infinity; identical images report psnr as the string "inf"
        out = {k: ("inf" if isinstance(v, float) and math.isinf(v) else v) for k, v in asdict(self).items() if v is not None}
        return json.dumps(out)

    def to_text(self) -> str:
        return "\n".join(f"{k} {getattr(self, k):.6g}" for k in self.computed())


def evaluate(test: np.ndarray, ref: np.ndarray | None = None) -> MetricReport:
    """Full-reference metrics when ``ref`` is given, plus the no-reference ones on ``test``."""
    rep = MetricReport(de=discrete_entropy(test), eme=eme(test))
    if ref is not None:
        rep.psnr = psnr(test, ref)
        rep.ssim = ssim(test, ref)
        rep.ms_ssim = ms_ssim(test, ref)
        rep.loe = loe(test, ref)
    return rep
