"""Stage 2: zero-shot enhancement of Gaussian colors with a weighted mixture of residual color operators.

Geometry and opacity are frozen; only the enhancer network is trained, and its
output colors are baked into a copy of the input set.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import GaussianSet
from .fit import AdamState, adam_step
from .losses import LossBreakdown, LossConfig, total_loss
from .nn import (
    bilinear_coords,
    bilinear_sample,
    bilinear_sample_backward,
    conv3x3,
    conv3x3_backward,
    relu,
    softmax,
    softmax_backward,
)
from .raster import PRODUCTION, RasterSettings, backward, build_tiles, render

# (cin, cout, stride) per encoder layer; ReLU after all but the last
ENCODER_LAYERS = ((3, 16, 2), (16, 24, 2), (24, 32, 2), (32, 32, 1))
FEATURE_DIM = 32
IDENTITY_SLOT = 0

EnhanceSink = Callable[[int, LossBreakdown], None]


@dataclass
class EnhanceConfig(LossConfig):
    iterations: int = 50000
    lr0: float = 0.002
    lr_floor_fraction: float = 0.01
    k: int = 16
    hid: int = 16
    tile_px: int = 16
    seed: int = 0

    def validate(self) -> None:
        if self.k < 2:
            raise ValueError(f"k must be >= 2 (identity plus at least one operator), got {self.k}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        for name in ("lr0", "lr_floor_fraction", "hid", "tile_px", "tau", "gamma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 < self.e_h < 1.0:
            raise ValueError(f"e_h must lie in (0, 1), got {self.e_h}")
        if any(lam < 0 for lam in self.lambdas()):
            raise ValueError("loss weights must be non-negative")


@dataclass
class ColorOperator:
    """One residual MLP 3 -> hid -> hid -> 3."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray


@dataclass
class EnhancerParams:
    """Named tensors: ``encoder.{i}.weight/bias``, ``head.weight/bias`` and stacked ``ops.{j}.weight/bias``.

    Operator tensors carry a leading axis of length K-1; the identity slot has no parameters.
    """

    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def k(self) -> int:
        return self.tensors["head.weight"].shape[1]

    @property
    def hid(self) -> int:
        return self.tensors["ops.0.weight"].shape[2]

    def names(self) -> list[str]:
        return list(self.tensors)

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors.values()])

    def load_flat(self, flat: np.ndarray) -> None:
        off = 0
        for t in self.tensors.values():
            t[...] = flat[off : off + t.size].reshape(t.shape)
            off += t.size

    def copy(self) -> "EnhancerParams":
        return EnhancerParams({k: v.copy() for k, v in self.tensors.items()})

    def operator(self, j: int) -> ColorOperator:
        """Learnable operator ``j`` in ``0 .. K-2`` (mixing channel ``j + 1``)."""
        t = self.tensors
        return ColorOperator(*(t[f"ops.{layer}.{kind}"][j] for layer in range(3) for kind in ("weight", "bias")))

    def validate(self) -> None:
        t = self.tensors
        required = [f"encoder.{i}.{k}" for i in range(len(ENCODER_LAYERS)) for k in ("weight", "bias")]
        required += ["head.weight", "head.bias"] + [f"ops.{i}.{k}" for i in range(3) for k in ("weight", "bias")]
        missing = [n for n in required if n not in t]
        if missing:
            raise ValueError(f"missing tensors: {missing}")
        extra = sorted(set(t) - set(required))
        if extra:
            raise ValueError(f"unexpected tensors: {extra}")
        for i, (cin, cout, _) in enumerate(ENCODER_LAYERS):
            if t[f"encoder.{i}.weight"].shape != (3, 3, cin, cout) or t[f"encoder.{i}.bias"].shape != (cout,):
                raise ValueError(f"encoder layer {i} has wrong shape")
        k = t["head.weight"].shape[1]
        if k < 2:
            raise ValueError("need K >= 2: an identity slot and at least one learnable operator")
        if t["head.weight"].shape != (FEATURE_DIM, k) or t["head.bias"].shape != (k,):
            raise ValueError("head has wrong shape")
        hid = t["ops.0.weight"].shape[2]
        expect = {
            "ops.0.weight": (k - 1, 3, hid), "ops.0.bias": (k - 1, hid),
            "ops.1.weight": (k - 1, hid, hid), "ops.1.bias": (k - 1, hid),
            "ops.2.weight": (k - 1, hid, 3), "ops.2.bias": (k - 1, 3),
        }
        for name, shape in expect.items():
            if t[name].shape != shape:
                raise ValueError(f"{name} has shape {t[name].shape}, expected {shape}")


def init_enhancer(k: int = 16, hid: int = 16, seed: int = 0) -> EnhancerParams:
    """He-scaled random encoder/head/hidden layers; operator output layers exactly zero."""
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    rng = np.random.default_rng(seed)
    t: dict[str, np.ndarray] = {}
    for i, (cin, cout, _) in enumerate(ENCODER_LAYERS):
        t[f"encoder.{i}.weight"] = rng.normal(0.0, math.sqrt(2.0 / (9 * cin)), (3, 3, cin, cout))
        t[f"encoder.{i}.bias"] = np.zeros(cout)
    t["head.weight"] = rng.normal(0.0, math.sqrt(1.0 / FEATURE_DIM), (FEATURE_DIM, k))
    t["head.bias"] = np.zeros(k)
    n_ops = k - 1
    t["ops.0.weight"] = rng.normal(0.0, math.sqrt(2.0 / 3), (n_ops, 3, hid))
    t["ops.0.bias"] = np.zeros((n_ops, hid))
    t["ops.1.weight"] = rng.normal(0.0, math.sqrt(2.0 / hid), (n_ops, hid, hid))
    t["ops.1.bias"] = np.zeros((n_ops, hid))
    t["ops.2.weight"] = np.zeros((n_ops, hid, 3))
    t["ops.2.bias"] = np.zeros((n_ops, 3))
    return EnhancerParams(t)


# ---------------------------------------------------------------- forward ops


def extract_features(guide: np.ndarray, params: EnhancerParams, caches: list | None = None) -> np.ndarray:
    """Encoder forward: (H, W, 3) -> (ceil(H/8), ceil(W/8), 32)."""
    x = np.asarray(guide, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != 3:
        raise ValueError(f"guide must be an (H, W, 3) image, got {x.shape}")
    last = len(ENCODER_LAYERS) - 1
    for i, (_, _, stride) in enumerate(ENCODER_LAYERS):
        x, cache = conv3x3(x, params.tensors[f"encoder.{i}.weight"], params.tensors[f"encoder.{i}.bias"], stride)
        if i < last:
            x = relu(x)
        if caches is not None:
            caches.append((cache, x))
    return x


def weight_logits(features: np.ndarray, params: EnhancerParams) -> np.ndarray:
    return features @ params.tensors["head.weight"] + params.tensors["head.bias"]


def sample_weights(logits: np.ndarray, centers: np.ndarray, width: int, height: int, return_coords: bool = False):
    """Bilinearly sample the logit map at each center, then softmax over K."""
    coords = bilinear_coords(np.asarray(centers, dtype=np.float64), width, height, logits.shape[1], logits.shape[0])
    w = softmax(bilinear_sample(logits, coords), axis=-1)
    return (w, coords) if return_coords else w


def _operators_forward(params: EnhancerParams, c: np.ndarray):
    t = params.tensors
    z1 = c @ t["ops.0.weight"] + t["ops.0.bias"][:, None, :]
    h1 = relu(z1)
    z2 = h1 @ t["ops.1.weight"] + t["ops.1.bias"][:, None, :]
    h2 = relu(z2)
    eta = h2 @ t["ops.2.weight"] + t["ops.2.bias"][:, None, :]
    pre = c[None] + eta
    return np.clip(pre, 0.0, 1.0), (c, z1, h1, z2, h2, pre)


def apply_operator(op: ColorOperator, c: np.ndarray) -> np.ndarray:
    """``clamp(c + mlp(c), 0, 1)`` for one operator; ``c`` is (3,) or (N, 3)."""
    c = np.asarray(c, dtype=np.float64)
    h1 = relu(c @ op.w1 + op.b1)
    h2 = relu(h1 @ op.w2 + op.b2)
    return np.clip(c + h2 @ op.w3 + op.b3, 0.0, 1.0)


def apply_operator_backward(op: ColorOperator, c: np.ndarray, d_out: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of ``sum(d_out * apply_operator(op, c))`` w.r.t. the operator params and ``c``."""
    c2 = np.atleast_2d(np.asarray(c, dtype=np.float64))
    d2 = np.atleast_2d(d_out)
    z1 = c2 @ op.w1 + op.b1
    h1 = relu(z1)
    z2 = h1 @ op.w2 + op.b2
    h2 = relu(z2)
    pre = c2 + h2 @ op.w3 + op.b3
    d_pre = d2 * ((pre >= 0.0) & (pre <= 1.0))
    d_h2 = d_pre @ op.w3.T
    d_z2 = d_h2 * (z2 > 0)
    d_h1 = d_z2 @ op.w2.T
    d_z1 = d_h1 * (z1 > 0)
    return {
        "w3": h2.T @ d_pre, "b3": d_pre.sum(0),
        "w2": h1.T @ d_z2, "b2": d_z2.sum(0),
        "w1": c2.T @ d_z1, "b1": d_z1.sum(0),
        "c": (d_pre + d_z1 @ op.w1.T).reshape(np.shape(c)),
    }


def mix_colors(colors: np.ndarray, weights: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """``c + sum_k w_k (phi_k - c)`` over the learnable slots.

    Equal to ``w_id c + sum_k w_k phi_k`` whenever the weights sum to one, and
    returns ``c`` bit-exactly when every ``phi_k == c``.  ``phi`` is (K-1, N, 3).
    """
    return colors + (weights[:, 1:].T[:, :, None] * (phi - colors[None])).sum(axis=0)


# ---------------------------------------------------------------- full chain


@dataclass
class _Forward:
    caches: list
    features: np.ndarray
    logits: np.ndarray
    weight_map: np.ndarray
    weights: np.ndarray
    coords: tuple
    phi: np.ndarray
    op_cache: tuple
    colors: np.ndarray


def enhancer_forward(params: EnhancerParams, gs: GaussianSet, guide: np.ndarray) -> _Forward:
    caches: list = []
    feats = extract_features(guide, params, caches)
    logits = weight_logits(feats, params)
    w, coords = sample_weights(logits, gs.mu, gs.width, gs.height, return_coords=True)
    phi, op_cache = _operators_forward(params, gs.color)
    ce = mix_colors(gs.color, w, phi)
    return _Forward(caches, feats, logits, softmax(logits, axis=-1), w, coords, phi, op_cache, ce)


def enhancer_backward(params: EnhancerParams, fwd: _Forward, d_colors: np.ndarray, d_map: np.ndarray) -> EnhancerParams:
    """Gradients w.r.t. every tensor, given dL/d(enhanced colors) and dL/d(softmaxed weight map)."""
    t = params.tensors
    g: dict[str, np.ndarray] = {}
    c = fwd.op_cache[0]

    # mixture
    d_phi = fwd.weights[:, 1:].T[:, :, None] * d_colors[None]  # (K-1, N, 3)
    d_w = np.zeros_like(fwd.weights)
    d_w[:, 1:] = (d_colors[None] * (fwd.phi - c[None])).sum(axis=-1).T

    # operators
    _, z1, h1, z2, h2, pre = fwd.op_cache
    d_pre = d_phi * ((pre >= 0.0) & (pre <= 1.0))
    g["ops.2.weight"] = h2.transpose(0, 2, 1) @ d_pre
    g["ops.2.bias"] = d_pre.sum(axis=1)
    d_z2 = (d_pre @ t["ops.2.weight"].transpose(0, 2, 1)) * (z2 > 0)
    g["ops.1.weight"] = h1.transpose(0, 2, 1) @ d_z2
    g["ops.1.bias"] = d_z2.sum(axis=1)
    d_z1 = (d_z2 @ t["ops.1.weight"].transpose(0, 2, 1)) * (z1 > 0)
    g["ops.0.weight"] = c.T @ d_z1
    g["ops.0.bias"] = d_z1.sum(axis=1)

    # sampling + softmax, plus the regularized weight map
    d_sample = softmax_backward(fwd.weights, d_w)
    d_logits = bilinear_sample_backward(d_sample, fwd.coords, fwd.logits.shape)
    d_logits += softmax_backward(fwd.weight_map, d_map)

    # head
    k = fwd.logits.shape[-1]
    g["head.weight"] = fwd.features.reshape(-1, FEATURE_DIM).T @ d_logits.reshape(-1, k)
    g["head.bias"] = d_logits.reshape(-1, k).sum(axis=0)
    d_x = d_logits @ t["head.weight"].T

    # encoder, last layer first
    last = len(ENCODER_LAYERS) - 1
    for i in range(last, -1, -1):
        cache, out = fwd.caches[i]
        if i < last:
            d_x = d_x * (out > 0)
        d_x, g[f"encoder.{i}.weight"], g[f"encoder.{i}.bias"] = conv3x3_backward(d_x, cache, need_input=i > 0)
    return EnhancerParams({name: g[name] for name in t})


def cosine_lr(lr0: float, t: int, total: int, floor_fraction: float = 0.01) -> float:
    lr_f = floor_fraction * lr0
    if total <= 0:
        return lr0
    return lr_f + 0.5 * (lr0 - lr_f) * (1.0 + math.cos(math.pi * min(t, total) / total))


def stage2_loss(params: EnhancerParams, gs: GaussianSet, guide: np.ndarray, cfg: EnhanceConfig, tiles=None,
                settings: RasterSettings = PRODUCTION, need_grad: bool = True):
    """Render the enhanced colors and evaluate the total loss; optionally backpropagate to ``params``."""
    if tiles is None:
        tiles = build_tiles(gs, cfg.tile_px, settings.cull_sigma)
    fwd = enhancer_forward(params, gs, guide)
    gs_e = gs.with_colors(fwd.colors)
    img = render(gs_e, cfg.tile_px, settings, tiles=tiles)
    parts, d_img, d_map = total_loss(img, guide, fwd.weight_map, cfg)
    if not need_grad:
        return parts, None, img
    d_colors = backward(gs_e, tiles, d_img, freeze_geometry=True, settings=settings).d_color
    return parts, enhancer_backward(params, fwd, d_colors, d_map), img


def enhance(
    gs: GaussianSet,
    cfg: EnhanceConfig | None = None,
    progress_sink: EnhanceSink | None = None,
    params: EnhancerParams | None = None,
    settings: RasterSettings = PRODUCTION,
) -> tuple[GaussianSet, EnhancerParams]:
    """Train the enhancer on one Stage-1 set and bake its colors into a copy of the set."""
    cfg = cfg or EnhanceConfig()
    cfg.validate()
    if params is None:
        params = init_enhancer(cfg.k, cfg.hid, cfg.seed)
    else:
        params = params.copy()
        params.validate()
    tiles = build_tiles(gs, cfg.tile_px, settings.cull_sigma)
    guide = render(gs, cfg.tile_px, settings, tiles=tiles)
    state = AdamState.zeros(params.flat().size)
    for it in range(cfg.iterations):
        parts, grads, _ = stage2_loss(params, gs, guide, cfg, tiles, settings)
        gflat = grads.flat()
        gflat[~np.isfinite(gflat)] = 0.0
        lr = cosine_lr(cfg.lr0, it, cfg.iterations, cfg.lr_floor_fraction)
        params.load_flat(adam_step(params.flat(), gflat, state, lr))
        if progress_sink is not None:
            progress_sink(it, parts)
    return bake(gs, params, guide), params


def bake(gs: GaussianSet, params: EnhancerParams, guide: np.ndarray) -> GaussianSet:
    """Copy of ``gs`` with enhanced colors; geometry and opacity arrays are copied unchanged."""
    out = gs.copy()
    out.color = enhancer_forward(params, gs, guide).colors
    return out


# ---------------------------------------------------------------- debug dumps


def weight_map_images(params: EnhancerParams, guide: np.ndarray) -> list[np.ndarray]:
    """Per-channel softmaxed weight maps, nearest-upsampled to the guide size (K grayscale images)."""
    m = softmax(weight_logits(extract_features(guide, params), params), axis=-1)
    h, w = guide.shape[:2]
    rows = np.minimum(np.arange(h) * m.shape[0] // h, m.shape[0] - 1)
    cols = np.minimum(np.arange(w) * m.shape[1] // w, m.shape[1] - 1)
    up = m[rows][:, cols]
    return [up[..., k : k + 1] for k in range(m.shape[-1])]


def operator_renders(gs: GaussianSet, params: EnhancerParams, tile_px: int = 16) -> list[np.ndarray]:
    """Render with each operator applied globally; identity slot first (K images)."""
    phi, _ = _operators_forward(params, gs.color)
    tiles = build_tiles(gs, tile_px)
    out = [render(gs, tile_px, tiles=tiles)]
    out += [render(gs.with_colors(phi[j]), tile_px, tiles=tiles) for j in range(phi.shape[0])]
    return out
