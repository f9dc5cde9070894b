import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gsenhance.core import (
    INIT_OPACITY,
    SCALE_FLOOR,
    Conic,
    GaussianSet,
    activate,
    conic_from_scale_rotation,
    conic_of,
    covariance,
    init_cold_start,
    init_scale,
    response,
)

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_cold_start_small():
    gs = init_cold_start(1, 4, 4, seed=0)
    assert gs.count == 1
    assert np.all((gs.mu >= 0) & (gs.mu < 4))
    assert np.array_equal(gs.color, np.zeros((1, 3)))
    assert gs.theta[0] == 0.0


def test_cold_start_deterministic():
    a = init_cold_start(50, 20, 30, seed=3)
    b = init_cold_start(50, 20, 30, seed=3)
    assert np.array_equal(a.to_flat(), b.to_flat())


def test_cold_start_mean():
    gs = init_cold_start(1000, 64, 64, seed=7)
    se = 64 / math.sqrt(12) / math.sqrt(1000)
    assert np.all(np.abs(gs.mu.mean(axis=0) - 32.0) <= 2 * se)


def test_cold_start_activations():
    gs = init_cold_start(16, 32, 32)
    assert np.allclose(gs.scales(), init_scale(16, 32, 32))
    assert np.allclose(gs.opacities(), INIT_OPACITY)


@pytest.mark.parametrize("count,w,h", [(0, 4, 4), (1, 0, 4), (1, 4, 0)])
def test_cold_start_rejects(count, w, h):
    with pytest.raises(ValueError):
        init_cold_start(count, w, h)


def test_covariance_examples():
    for th in (0.0, 0.3, 2.0):
        assert np.allclose(covariance(1, 1, th), np.eye(2))
    assert np.allclose(covariance(2, 1, 0), np.diag([4.0, 1.0]))
    assert np.allclose(covariance(2, 1, math.pi / 2), np.diag([1.0, 4.0]))
    with pytest.raises(ValueError):
        covariance(0.0, 1.0, 0.0)


def test_conic_examples():
    q = conic_of(np.eye(2))
    assert (q.a, q.b, q.c) == (1.0, 0.0, 1.0)
    q = conic_of(np.diag([4.0, 1.0]))
    assert (q.a, q.b, q.c) == (0.25, 0.0, 1.0)
    sigma = covariance(2, 1, math.pi / 4)
    assert np.allclose(conic_of(sigma).matrix() @ sigma, np.eye(2), atol=1e-6)
    with pytest.raises(np.linalg.LinAlgError):
        conic_of(np.zeros((2, 2)))


def test_conic_involution_1000():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        sx, sy = rng.uniform(0.3, 50, 2)
        th = rng.uniform(-np.pi, np.pi)
        sigma = covariance(sx, sy, th)
        assert np.abs(conic_of(sigma).matrix() @ sigma - np.eye(2)).max() <= 1e-6


def test_stable_conic_matches_inverse():
    rng = np.random.default_rng(1)
    scales = rng.uniform(0.3, 50, (200, 2))
    theta = rng.uniform(-np.pi, np.pi, 200)
    q = conic_from_scale_rotation(scales, theta)
    for i in range(200):
        inv = np.linalg.inv(covariance(*scales[i], theta[i]))
        assert np.allclose([inv[0, 0], inv[0, 1], inv[1, 1]], q[i], rtol=1e-9, atol=1e-12)


def test_response_examples():
    eye = Conic(1.0, 0.0, 1.0)
    assert response(eye, (3.0, 4.0), (3.0, 4.0)) == 1.0
    assert response(eye, (0, 0), (1, 0)) == pytest.approx(0.60653, abs=1e-5)
    assert response(eye, (0, 0), (3, 4)) == pytest.approx(3.73e-6, rel=1e-3)


@given(st.floats(0.3, 20), st.floats(0.3, 20), st.floats(-math.pi, math.pi), st.floats(-math.pi, math.pi),
       st.tuples(st.floats(-10, 10), st.floats(-10, 10)))
def test_response_rotation_invariant(sx, sy, th, phi, d):
    q = conic_of(covariance(sx, sy, th))
    q_rot = conic_of(covariance(sx, sy, th + phi))
    c, s = math.cos(phi), math.sin(phi)
    d_rot = (c * d[0] - s * d[1], s * d[0] + c * d[1])
    assert response(q, (0, 0), d) == pytest.approx(response(q_rot, (0, 0), d_rot), abs=1e-6)


@given(st.floats(0.3, 20), st.floats(0.3, 20), st.floats(-math.pi, math.pi), st.floats(-math.pi, math.pi))
def test_response_monotone_along_ray(sx, sy, th, ang):
    q = conic_of(covariance(sx, sy, th))
    vals = [response(q, (1.0, 2.0), (1.0 + t * math.cos(ang), 2.0 + t * math.sin(ang))) for t in np.linspace(0, 40, 60)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))


def test_activate_examples():
    gs = GaussianSet(np.zeros((3, 2)), np.array([[0.0, 0.0], [5.0, -5.0], [0.0, 0.0]]), np.zeros(3), np.zeros((3, 3)),
                     np.array([0.0, 800.0, -3.0]), 8, 8)
    sx, sy, th, o = activate(gs, 0)
    assert o == 0.5
    assert sx == pytest.approx(SCALE_FLOOR + math.log(2)) and sy == sx
    assert activate(gs, 1)[3] == pytest.approx(1.0)
    with pytest.raises(IndexError):
        activate(gs, 3)


@settings(max_examples=200)
@given(finite, finite, finite)
def test_activation_invariants(sr, tr, orw):
    gs = GaussianSet(np.zeros((1, 2)), np.array([[sr, tr]]), np.zeros(1), np.zeros((1, 3)), np.array([orw]), 4, 4)
    sx, sy, _, o = activate(gs, 0)
    assert sx >= SCALE_FLOOR and sy >= SCALE_FLOOR
    assert 0.0 <= o <= 1.0 and math.isfinite(o)
    assert gs.is_finite()


def test_flat_roundtrip():
    gs = init_cold_start(7, 9, 5, seed=2)
    flat = gs.to_flat()
    assert flat.size == 7 * 9
    other = gs.copy()
    other.load_flat(flat * 2)
    assert np.array_equal(other.to_flat(), flat * 2)
    assert np.array_equal(gs.to_flat(), flat)
