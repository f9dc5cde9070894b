"""Stage 1: cold-start fitting of a GaussianSet to an image with Adam."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import GaussianSet, init_cold_start
from .metrics import ms_ssim, psnr
from .raster import PRODUCTION, RasterSettings, backward, build_tiles, render

log = logging.getLogger(__name__)

ProgressSink = Callable[[int, float, float], None]


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), **kw)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float) -> np.ndarray:
    """Bias-corrected Adam update; advances ``state`` in place and returns new params."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError(f"length mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grads
    state.v *= b2
    state.v += (1.0 - b2) * grads * grads
    m_hat = state.m / (1.0 - b1**state.t)
    v_hat = state.v / (1.0 - b2**state.t)
    return params - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def lr_schedule_step(lr0: float, it: int, decay: float = 0.9, every: int = 7000) -> float:
    return lr0 * decay ** (it // every)


@dataclass
class FitConfig:
    n_gaussians: int = 70000
    iterations: int = 30000
    lr0: float = 0.01
    step_decay: float = 0.9
    step_every: int = 7000
    lambda_ssim: float = 0.2
    tile_px: int = 16
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_gaussians", "iterations", "lr0", "step_decay", "step_every", "tile_px"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.lambda_ssim <= 1.0:
            raise ValueError(f"lambda_ssim must lie in [0, 1], got {self.lambda_ssim}")


def reconstruction_loss(rendered: np.ndarray, target: np.ndarray, lambda_ssim: float = 0.2):
    """``(1 - l) * mean|r - t| + l * (1 - MS-SSIM(r, t))`` and its gradient w.r.t. ``rendered``."""
    if rendered.shape != target.shape:
        raise ValueError(f"shape mismatch {rendered.shape} vs {target.shape}")
    if not 0.0 <= lambda_ssim <= 1.0:
        raise ValueError(f"lambda_ssim must lie in [0, 1], got {lambda_ssim}")
    diff = rendered - target
    loss = (1.0 - lambda_ssim) * float(np.abs(diff).mean())
    grad = (1.0 - lambda_ssim) * np.sign(diff) / diff.size
    if lambda_ssim > 0.0:
        score, d_score = ms_ssim(rendered, target, return_grad=True)
        loss += lambda_ssim * (1.0 - score)
        grad -= lambda_ssim * d_score
    return loss, grad


def fit_image(
    target: np.ndarray,
    cfg: FitConfig | None = None,
    progress_sink: ProgressSink | None = None,
    settings: RasterSettings = PRODUCTION,
) -> GaussianSet:
    cfg = cfg or FitConfig()
    cfg.validate()
    target = np.asarray(target, dtype=np.float64)
    if target.ndim != 3 or target.shape[2] != 3:
        raise ValueError(f"target must be an (H, W, 3) image, got shape {target.shape}")
    if target.min() < 0.0 or target.max() > 1.0:
        raise ValueError("target values must lie in [0, 1]")
    h, w, _ = target.shape
    gs = init_cold_start(cfg.n_gaussians, w, h, cfg.seed)
    state = AdamState.zeros(gs.to_flat().size)
    for it in range(cfg.iterations):
        tiles = build_tiles(gs, cfg.tile_px, settings.cull_sigma)
        img = render(gs, cfg.tile_px, settings, tiles=tiles)
        loss, g_img = reconstruction_loss(img, target, cfg.lambda_ssim)
        grads = backward(gs, tiles, g_img, settings=settings).to_flat()
        bad = ~np.isfinite(grads)
        if bad.any():
            log.warning("iteration %d: zeroing %d non-finite gradient entries", it, int(bad.sum()))
            grads[bad] = 0.0
        lr = lr_schedule_step(cfg.lr0, it, cfg.step_decay, cfg.step_every)
        gs.load_flat(adam_step(gs.to_flat(), grads, state, lr))
        if progress_sink is not None:
            progress_sink(it, loss, psnr(img, target))
    return gs


def smoothed(values, window: int = 100) -> np.ndarray:
    """Trailing moving average (valid part only)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        return v.copy()
    c = np.cumsum(np.insert(v, 0, 0.0))
    return (c[window:] - c[:-window]) / window


def is_non_increasing(values, window: int = 100, tail: float = 0.8, slack: float = 0.0) -> bool:
    """Windowed loss is non-increasing over the final ``tail`` fraction of iterations."""
    s = smoothed(values, window)
    start = int(math.floor(len(values) * (1.0 - tail)))
    s = s[max(0, start - window + 1) :] if len(values) >= window else s
    return bool(np.all(np.diff(s) <= slack))
