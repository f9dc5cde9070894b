"""Gaussian primitive storage, activations and covariance/conic math.

Images throughout the package are plain ``float64`` arrays of shape
``(H, W, C)`` (row-major, channel-interleaved).  Pixel ``(x, y)`` is sampled
at its center ``(x + 0.5, y + 0.5)`` in the same coordinate frame as ``mu``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SCALE_FLOOR = 0.3
DET_EPS = 1e-12
INIT_OPACITY = 0.1

# raw parameter order, also the on-disk record order
PARAM_LAYOUT = (("mu", 2), ("scale_raw", 2), ("theta", 1), ("color", 3), ("opacity_raw", 1))
PARAMS_PER_PRIMITIVE = 9


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=np.float64)
    # log(expm1(y)) without overflow for large y
    return np.where(y > 30.0, y + np.log1p(-np.exp(-np.minimum(y, 700.0))), np.log(np.expm1(np.minimum(y, 30.0))))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class Conic:
    """Entries of the symmetric inverse covariance ``[[a, b], [b, c]]``."""

    a: float
    b: float
    c: float

    def matrix(self) -> np.ndarray:
        return np.array([[self.a, self.b], [self.b, self.c]])


@dataclass
class GaussianSet:
    """Structure-of-arrays storage for N primitives over a ``width x height`` viewport."""

    mu: np.ndarray  # (N, 2) pixel coords, origin top-left
    scale_raw: np.ndarray  # (N, 2) pre-softplus
    theta: np.ndarray  # (N,) radians
    color: np.ndarray  # (N, 3) unconstrained RGB
    opacity_raw: np.ndarray  # (N,) pre-sigmoid
    width: int
    height: int

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1, 2)
        n = self.mu.shape[0]
        self.scale_raw = np.asarray(self.scale_raw, dtype=np.float64).reshape(n, 2)
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(n)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(n, 3)
        self.opacity_raw = np.asarray(self.opacity_raw, dtype=np.float64).reshape(n)
        self.width = int(self.width)
        self.height = int(self.height)
        if self.width < 0 or self.height < 0:
            raise ValueError("viewport dimensions must be non-negative")

    @property
    def count(self) -> int:
        return self.mu.shape[0]

    def __len__(self) -> int:
        return self.count

    def scales(self) -> np.ndarray:
        return SCALE_FLOOR + softplus(self.scale_raw)

    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_raw)

    def copy(self) -> "GaussianSet":
        return GaussianSet(
            self.mu.copy(),
            self.scale_raw.copy(),
            self.theta.copy(),
            self.color.copy(),
            self.opacity_raw.copy(),
            self.width,
            self.height,
        )

    def with_colors(self, color: np.ndarray) -> "GaussianSet":
        """Shallow copy sharing geometry/opacity arrays, with a new color block."""
        return GaussianSet(self.mu, self.scale_raw, self.theta, color, self.opacity_raw, self.width, self.height)

    def to_flat(self) -> np.ndarray:
        return np.concatenate([getattr(self, name).ravel() for name, _ in PARAM_LAYOUT])

    def load_flat(self, flat: np.ndarray) -> None:
        n = self.count
        off = 0
        for name, k in PARAM_LAYOUT:
            block = flat[off : off + n * k]
            getattr(self, name)[...] = block.reshape(getattr(self, name).shape)
            off += n * k

    def records(self) -> np.ndarray:
        """(N, 9) array in on-disk order."""
        return np.column_stack([self.mu, self.scale_raw, self.theta, self.color, self.opacity_raw])

    @classmethod
    def from_records(cls, rec: np.ndarray, width: int, height: int) -> "GaussianSet":
        rec = np.asarray(rec, dtype=np.float64).reshape(-1, PARAMS_PER_PRIMITIVE)
        return cls(rec[:, 0:2], rec[:, 2:4], rec[:, 4], rec[:, 5:8], rec[:, 8], width, height)

    @classmethod
    def empty(cls, width: int, height: int) -> "GaussianSet":
        z = np.zeros((0,))
        return cls(z.reshape(0, 2), z.reshape(0, 2), z, z.reshape(0, 3), z, width, height)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.to_flat()).all())


def init_scale(count: int, width: int, height: int) -> float:
    """Isotropic average-coverage radius ``sqrt(H*W/N)``, kept above the floor."""
    return max(math.sqrt(width * height / count), SCALE_FLOOR + 0.05)


def init_cold_start(count: int, width: int, height: int, seed: int = 0) -> GaussianSet:
    """Uniform random centers, isotropic scale, zero color, small opacity."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if width < 1 or height < 1:
        raise ValueError(f"viewport must have positive area, got {width}x{height}")
    rng = np.random.default_rng(seed)
    mu = rng.uniform(0.0, 1.0, size=(count, 2)) * np.array([width, height], dtype=np.float64)
    s = init_scale(count, width, height)
    scale_raw = np.full((count, 2), float(softplus_inv(s - SCALE_FLOOR)))
    return GaussianSet(
        mu=mu,
        scale_raw=scale_raw,
        theta=np.zeros(count),
        color=np.zeros((count, 3)),
        opacity_raw=np.full(count, float(logit(INIT_OPACITY))),
        width=width,
        height=height,
    )


def activate(gs: GaussianSet, index: int) -> tuple[float, float, float, float]:
    if not 0 <= index < gs.count:
        raise IndexError(f"primitive index {index} out of range for {gs.count} primitives")
    sx, sy = SCALE_FLOOR + softplus(gs.scale_raw[index])
    o = sigmoid(gs.opacity_raw[index : index + 1])[0]
    return float(sx), float(sy), float(gs.theta[index]), float(o)


def covariance(s_x: float, s_y: float, theta: float) -> np.ndarray:
    if s_x <= 0 or s_y <= 0:
        raise ValueError(f"scales must be positive, got ({s_x}, {s_y})")
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s], [s, c]])
    scl = np.diag([s_x, s_y])
    m = rot @ scl
    return m @ m.T


def covariance_batch(scales: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Vectorized covariance entries ``(sxx, sxy, syy)`` for (N, 2) scales."""
    c, s = np.cos(theta), np.sin(theta)
    vx, vy = scales[:, 0] ** 2, scales[:, 1] ** 2
    sxx = c * c * vx + s * s * vy
    syy = s * s * vx + c * c * vy
    sxy = c * s * (vx - vy)
    return np.stack([sxx, sxy, syy], axis=1)


def conic_of(sigma: np.ndarray) -> Conic:
    sigma = np.asarray(sigma, dtype=np.float64)
    sxx, sxy, syy = sigma[0, 0], 0.5 * (sigma[0, 1] + sigma[1, 0]), sigma[1, 1]
    det = sxx * syy - sxy * sxy
    if not det > DET_EPS:
        raise np.linalg.LinAlgError(f"covariance is near-singular (det={det:.3e})")
    return Conic(a=float(syy / det), b=float(-sxy / det), c=float(sxx / det))


def conic_batch(cov: np.ndarray) -> np.ndarray:
    """(N, 3) covariance entries -> (N, 3) conic entries ``(a, b, c)``."""
    sxx, sxy, syy = cov[:, 0], cov[:, 1], cov[:, 2]
    det = sxx * syy - sxy * sxy
    return np.stack([syy / det, -sxy / det, sxx / det], axis=1)


def conic_from_scale_rotation(scales: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Conic entries as ``R diag(1/sx^2, 1/sy^2) R^T``; avoids the det cancellation."""
    c, s = np.cos(theta), np.sin(theta)
    ix, iy = 1.0 / scales[:, 0] ** 2, 1.0 / scales[:, 1] ** 2
    return np.stack([c * c * ix + s * s * iy, c * s * (ix - iy), s * s * ix + c * c * iy], axis=1)


def conics(gs: GaussianSet) -> np.ndarray:
    return conic_from_scale_rotation(gs.scales(), gs.theta)


def response(conic: Conic, center, pixel) -> float:
    dx = pixel[0] - center[0]
    dy = pixel[1] - center[1]
    power = -0.5 * (conic.a * dx * dx + 2.0 * conic.b * dx * dy + conic.c * dy * dy)
    return math.exp(power)
