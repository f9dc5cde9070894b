"""Shared fixtures-by-function for the test modules."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from gsenhance.core import GaussianSet

DATA = Path(__file__).parent / "data"
NATURAL = DATA / "natural128.png"

# criterion number -> one summary line, printed by conftest at the end of the run
ACCEPTANCE: dict[int, str] = {}


def record(num: int, ok: bool, detail: str) -> bool:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {num}: {detail}"
    ACCEPTANCE[num] = line
    print(line)
    return ok


def random_set(rng: np.random.Generator, n: int, width: int, height: int, scale_mu: float = 1.0,
               scale_sd: float = 1.0, opacity_sd: float = 2.0) -> GaussianSet:
    return GaussianSet(
        mu=rng.uniform(0.0, 1.0, (n, 2)) * [width, height],
        scale_raw=rng.normal(scale_mu, scale_sd, (n, 2)),
        theta=rng.uniform(-np.pi, np.pi, n),
        color=rng.uniform(0.0, 1.0, (n, 3)),
        opacity_raw=rng.normal(0.0, opacity_sd, n),
        width=width,
        height=height,
    )


def f32_set(rng: np.random.Generator, n: int, width: int, height: int) -> GaussianSet:
    """Random set whose values are exactly representable in float32."""
    gs = random_set(rng, n, width, height)
    return GaussianSet.from_records(gs.records().astype(np.float32).astype(np.float64), width, height)


def fd_roundoff(fp: float, fm: float, h: float) -> float:
    """Error of a central difference caused by a few ulps of rounding in each function value."""
    return 8 * np.finfo(float).eps * max(abs(fp), abs(fm)) / h


def rel_err(a: float, b: float, floor: float = 1e-8, roundoff: float = 0.0) -> float:
    return max(abs(a - b) - roundoff, 0.0) / max(abs(a), abs(b), floor)


def fd_coords(f, x: np.ndarray, grad: np.ndarray, idx, h: float = 1e-6) -> list[float]:
    """Relative errors of ``grad`` against central differences of scalar ``f`` at flat indices ``idx``."""
    errs = []
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        errs.append(rel_err((fp - fm) / (2 * h), g[i], roundoff=fd_roundoff(fp, fm, h)))
    return errs


def fd_directional(f, x: np.ndarray, grad: np.ndarray, rng: np.random.Generator, n_dirs: int, h: float = 1e-6) -> list[float]:
    """Directional-derivative check along random unit directions."""
    errs = []
    for _ in range(n_dirs):
        d = rng.normal(size=x.shape)
        d /= np.linalg.norm(d)
        fp, fm = f(x + h * d), f(x - h * d)
        errs.append(rel_err((fp - fm) / (2 * h), float((grad * d).sum()), roundoff=fd_roundoff(fp, fm, h)))
    return errs
