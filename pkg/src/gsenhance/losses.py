"""Zero-reference enhancement losses.

Every term returns ``(value, grad)`` where ``grad`` has the shape of the
differentiated input.  Reference images (``orig``) carry no gradient.
"""
from __future__ import annotations

from dataclasses import astuple, dataclass, fields

import numpy as np

from ._grid import pad_reflect, pad_reflect_t
from .metrics import LUMA

HUE_EPS = 1e-6
COL_EPS = 1e-8
ENT_EPS = 1e-8


@dataclass
class LossConfig:
    lambda1: float = 50.0  # exposure
    lambda2: float = 25.0  # hue
    lambda3: float = 32.5  # spatial
    lambda4: float = 2.91  # colorfulness
    lambda5: float = 0.44  # contrast
    lambda6: float = 500.0  # weight-map TV
    lambda7: float = 0.01  # weight-map entropy
    e_h: float = 0.7
    tau: float = 0.1
    gamma: float = 1.05
    reg_reduction: str = "mean"  # or "sum" over weight-map pixels

    def lambdas(self) -> tuple[float, ...]:
        return (self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5, self.lambda6, self.lambda7)


@dataclass
class LossBreakdown:
    total: float
    exp: float
    hue: float
    spa: float
    col: float
    con: float
    tv: float
    ent: float
    weights: tuple[float, ...] = ()

    CSV_HEADER = "iter,total,exp,hue,spa,col,con,tv,ent"

    def csv_row(self, it: int) -> str:
        vals = astuple(self)[:8]
        return f"{it}," + ",".join(f"{v:.9g}" for v in vals)

    def terms(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)[1:8]}


def luminance(img: np.ndarray) -> np.ndarray:
    """BT.601 luma as an (H, W, 1) image."""
    return (np.asarray(img, dtype=np.float64) @ LUMA)[..., None]


def exposure_loss(enh: np.ndarray, e_h: float = 0.7):
    y = enh @ LUMA
    diff = float(y.mean()) - e_h
    grad = np.broadcast_to(2.0 * diff / y.size * LUMA, enh.shape).copy()
    return diff * diff, grad


def _hue_sat(img: np.ndarray, need_grad: bool = False):
    img = np.asarray(img, dtype=np.float64)
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    # argmax tie-break R > G > B
    imax = np.where((r >= g) & (r >= b), 0, np.where(g >= b, 1, 2))
    imin = np.where((b <= g) & (b <= r), 2, np.where(g <= r, 1, 0))
    vmax = np.choose(imax, (r, g, b))
    vmin = np.choose(imin, (r, g, b))
    delta = vmax - vmin
    chroma = delta > 0
    safe = np.where(chroma, delta, 1.0)
    num = np.choose(imax, (g - b, b - r, r - g))
    h6 = np.choose(imax, (0.0, 2.0, 4.0)) + num / safe
    hue = np.where(chroma, np.mod(h6 / 6.0, 1.0), 0.0)
    hue = np.where(hue >= 1.0, 0.0, hue)
    sat = np.where(vmax > 0, delta / np.where(vmax > 0, vmax, 1.0), 0.0)
    if not need_grad:
        return hue, sat, None
    # d num / d(r, g, b) per argmax branch
    dnum = np.array([[0.0, 1.0, -1.0], [-1.0, 0.0, 1.0], [1.0, -1.0, 0.0]])[imax]
    eye = np.eye(3)
    ddelta = eye[imax] - eye[imin]
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        jac = (dnum - (num / safe)[..., None] * ddelta) / (6.0 * safe[..., None])
    jac = np.where(chroma[..., None] & np.isfinite(jac), jac, 0.0)
    return hue, sat, jac


def rgb_to_hs(img: np.ndarray):
    """Hexagonal HSV hue in [0, 1) and saturation in [0, 1]; gray pixels get hue 0."""
    hue, sat, _ = _hue_sat(img)
    return hue, sat


def hue_loss(enh: np.ndarray, orig: np.ndarray, tau: float = 0.1):
    h_o, s_o = rgb_to_hs(orig)
    mask = (s_o > tau).astype(np.float64)
    h_e, _, jac = _hue_sat(enh, need_grad=True)
    d = h_e - h_o
    u = np.abs(d)
    near = u <= 0.5
    dist = np.where(near, u, 1.0 - u)
    denom = mask.sum() + HUE_EPS
    value = float((mask * dist).sum() / denom)
    ddist = np.where(near, np.sign(d), -np.sign(d)) * mask / denom
    return value, ddist[..., None] * jac


def colorfulness_loss(enh: np.ndarray):
    r, g, b = enh[..., 0], enh[..., 1], enh[..., 2]
    rg = r - g
    yb = 0.5 * (r + g) - b
    n = rg.size
    rg_c = rg - rg.mean()
    yb_c = yb - yb.mean()
    var_rg = float((rg_c**2).mean())
    var_yb = float((yb_c**2).mean())
    root = np.sqrt(var_rg + var_yb + COL_EPS)
    scale = -1.0 / (2.0 * root)
    d_rg = scale * 2.0 * rg_c / n
    d_yb = scale * 2.0 * yb_c / n
    grad = np.stack([d_rg + 0.5 * d_yb, -d_rg + 0.5 * d_yb, -d_yb], axis=-1)
    return float(-root), grad


def contrast_loss(enh: np.ndarray, orig: np.ndarray, gamma: float = 1.05):
    y_e = enh @ LUMA
    sigma_o = float((orig @ LUMA).std())
    sigma_e = float(y_e.std())
    gap = gamma * sigma_o - sigma_e
    if gap <= 0.0:
        return 0.0, np.zeros_like(enh)
    if sigma_e == 0.0:
        # std is not differentiable at a constant image; use the zero subgradient
        return gap, np.zeros_like(enh)
    d_y = -(y_e - y_e.mean()) / (y_e.size * sigma_e)
    return gap, d_y[..., None] * LUMA


def _sobel(x: np.ndarray):
    p = pad_reflect(x, 1)
    gx = (p[:-2, 2:] - p[:-2, :-2]) + 2.0 * (p[1:-1, 2:] - p[1:-1, :-2]) + (p[2:, 2:] - p[2:, :-2])
    gy = (p[2:, :-2] - p[:-2, :-2]) + 2.0 * (p[2:, 1:-1] - p[:-2, 1:-1]) + (p[2:, 2:] - p[:-2, 2:])
    return gx, gy


def _sobel_t(ggx: np.ndarray, ggy: np.ndarray, shape) -> np.ndarray:
    h, w = shape[:2]
    dp = np.zeros((h + 2, w + 2) + shape[2:])
    for rows, wt in ((slice(0, -2), 1.0), (slice(1, -1), 2.0), (slice(2, None), 1.0)):
        dp[rows, 2:] += wt * ggx
        dp[rows, :-2] -= wt * ggx
    for cols, wt in ((slice(0, -2), 1.0), (slice(1, -1), 2.0), (slice(2, None), 1.0)):
        dp[2:, cols] += wt * ggy
        dp[:-2, cols] -= wt * ggy
    return pad_reflect_t(dp, shape, 1)


def spatial_loss(enh: np.ndarray, orig: np.ndarray):
    """Mean L1 between Sobel gradient maps (reflection-padded, per channel)."""
    ex, ey = _sobel(enh)
    ox, oy = _sobel(orig)
    dx, dy = ex - ox, ey - oy
    n = dx.size
    value = float(np.abs(dx).sum() / n + np.abs(dy).sum() / n)
    return value, _sobel_t(np.sign(dx) / n, np.sign(dy) / n, enh.shape)


def weight_regularization(m: np.ndarray, reduction: str = "mean"):
    """TV and entropy of a softmaxed (h, w, K) weight map.  Returns ``(tv, ent, d_tv, d_ent)``."""
    m = np.asarray(m, dtype=np.float64)
    dx = m[:, 1:] - m[:, :-1]
    dy = m[1:] - m[:-1]
    mean = reduction == "mean"
    if reduction not in ("mean", "sum"):
        raise ValueError(f"reduction must be 'mean' or 'sum', got {reduction!r}")
    nx = dx.size if (mean and dx.size) else 1
    ny = dy.size if (mean and dy.size) else 1
    tv = float(np.abs(dx).sum() / nx + np.abs(dy).sum() / ny)
    d_tv = np.zeros_like(m)
    sx, sy = np.sign(dx) / nx, np.sign(dy) / ny
    d_tv[:, 1:] += sx
    d_tv[:, :-1] -= sx
    d_tv[1:] += sy
    d_tv[:-1] -= sy

    npix = m.shape[0] * m.shape[1] if mean else 1
    logw = np.log(m + ENT_EPS)
    ent = float(-(m * logw).sum() / npix)
    d_ent = -(logw + m / (m + ENT_EPS)) / npix
    return tv, ent, d_tv, d_ent


def total_loss(enh: np.ndarray, orig: np.ndarray, m: np.ndarray, cfg: LossConfig | None = None):
    """Weighted sum of all terms.  Returns ``(breakdown, d_enh, d_m)``."""
    cfg = cfg or LossConfig()
    l1, l2, l3, l4, l5, l6, l7 = cfg.lambdas()
    exp_v, exp_g = exposure_loss(enh, cfg.e_h)
    hue_v, hue_g = hue_loss(enh, orig, cfg.tau)
    spa_v, spa_g = spatial_loss(enh, orig)
    col_v, col_g = colorfulness_loss(enh)
    con_v, con_g = contrast_loss(enh, orig, cfg.gamma)
    tv_v, ent_v, tv_g, ent_g = weight_regularization(m, cfg.reg_reduction)
    total = l1 * exp_v + l2 * hue_v + l3 * spa_v + l4 * col_v + l5 * con_v + l6 * tv_v + l7 * ent_v
    d_enh = l1 * exp_g + l2 * hue_g + l3 * spa_g + l4 * col_g + l5 * con_g
    d_m = l6 * tv_g + l7 * ent_g
    parts = LossBreakdown(total, exp_v, hue_v, spa_v, col_v, con_v, tv_v, ent_v, cfg.lambdas())
    return parts, d_enh, d_m
