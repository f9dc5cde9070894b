import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gsenhance.core import GaussianSet, conic_from_scale_rotation, logit, softplus_inv, SCALE_FLOOR
from gsenhance.fit import AdamState, adam_step
from gsenhance.raster import (
    ALPHA_CUTOFF,
    EXACT,
    PRODUCTION,
    T_MIN,
    RasterSettings,
    backward,
    build_tiles,
    render,
    render_reference,
)
from helpers import fd_coords, random_set

NO_CUTOFF = RasterSettings(alpha_cutoff=0.0, t_min=0.0, cull_sigma=PRODUCTION.cull_sigma)


def one(mu, scale, theta=0.0, color=(1.0, 0.0, 0.0), opacity=0.5, w=32, h=32):
    return GaussianSet(
        np.array([mu], float), np.full((1, 2), softplus_inv(np.asarray(scale, float) - SCALE_FLOOR)),
        np.array([theta]), np.array([color], float), np.array([logit(opacity)]), w, h,
    )


def test_tiles_empty():
    tiles = build_tiles(GaussianSet.empty(40, 20), 16)
    assert tiles.n_tiles == 3 * 2
    assert tiles.ids.size == 0
    assert np.all(tiles.offsets == 0)


def test_tiles_single_interior():
    gs = one((24.0, 8.0), (1.0, 1.0), w=64, h=32)  # 3-sigma box [21, 27] x [5, 11] inside tile (1, 0)
    tiles = build_tiles(gs, 16)
    hits = [(tx, ty) for ty in range(tiles.tiles_y) for tx in range(tiles.tiles_x) if tiles.tile_list(tx, ty).size]
    assert hits == [(1, 0)]


def test_tiles_straddle():
    gs = one((16.0, 8.0), (1.0, 1.0), w=64, h=32)
    tiles = build_tiles(gs, 16)
    assert tiles.tile_list(0, 0).tolist() == [0]
    assert tiles.tile_list(1, 0).tolist() == [0]
    assert tiles.tile_list(2, 0).size == 0


def test_tiles_sorted_and_unique():
    rng = np.random.default_rng(4)
    gs = random_set(rng, 300, 70, 50)
    tiles = build_tiles(gs, 16)
    for t in range(tiles.n_tiles):
        lst = tiles.ids[tiles.offsets[t] : tiles.offsets[t + 1]]
        assert np.all(np.diff(lst) > 0)


def test_tiles_cover_3sigma_boxes():
    rng = np.random.default_rng(5)
    gs = random_set(rng, 100, 64, 48)
    tiles = build_tiles(gs, 16)
    r = 3.0 * gs.scales().max(axis=1)
    for i in range(gs.count):
        x0, x1 = gs.mu[i, 0] - r[i], gs.mu[i, 0] + r[i]
        y0, y1 = gs.mu[i, 1] - r[i], gs.mu[i, 1] + r[i]
        for ty in range(tiles.tiles_y):
            for tx in range(tiles.tiles_x):
                inter = x1 >= tx * 16 and x0 < (tx + 1) * 16 and y1 >= ty * 16 and y0 < (ty + 1) * 16
                if inter:
                    assert i in tiles.tile_list(tx, ty)


def test_render_empty():
    assert np.array_equal(render(GaussianSet.empty(5, 7)), np.zeros((7, 5, 3)))
    assert np.array_equal(render_reference(GaussianSet.empty(5, 7)), np.zeros((7, 5, 3)))


def test_render_center_value():
    gs = one((10.5, 6.5), (2.0, 3.0), theta=0.4, opacity=0.999)
    img = render(gs)
    assert img[6, 10] == pytest.approx([0.999, 0.0, 0.0], abs=1e-12)


def test_reference_closed_form():
    gs = one((16.0, 16.0), (3.0, 2.0), theta=0.7, color=(0.2, 0.5, 0.9), opacity=0.99)
    ys, xs = np.mgrid[0:32, 0:32] + 0.5
    a, b, c = conic_from_scale_rotation(gs.scales(), gs.theta)[0]
    dx, dy = xs - 16.0, ys - 16.0
    alpha = 0.99 * np.exp(-0.5 * (a * dx**2 + 2 * b * dx * dy + c * dy**2))
    assert np.allclose(render_reference(gs), alpha[..., None] * [0.2, 0.5, 0.9], atol=1e-12)


def test_reference_translation_equivariant():
    rng = np.random.default_rng(2)
    gs = random_set(rng, 20, 40, 40)
    shifted = gs.copy()
    shifted.mu += [3, 5]
    a = render_reference(gs)
    b = render_reference(shifted)
    assert np.allclose(a[:-5, :-3], b[5:, 3:], atol=1e-12)


def test_tiled_matches_reference_no_cutoff():
    rng = np.random.default_rng(11)
    for _ in range(20):
        n = int(rng.integers(1, 51))
        gs = random_set(rng, n, 32, 32)
        assert np.abs(render(gs, 16, EXACT) - render_reference(gs)).max() <= 1e-5
        # culling at 3 sigma alone loses at most exp(-4.5) per primitive per pixel
        assert np.abs(render(gs, 16, NO_CUTOFF) - render_reference(gs)).max() <= n * math.exp(-4.5)


def _skipped_alpha_bound(gs, tiles, cutoff):
    h, w = gs.height, gs.width
    ys, xs = np.mgrid[0:h, 0:w] + 0.5
    conic = conic_from_scale_rotation(gs.scales(), gs.theta)
    opac = gs.opacities()
    owner = (ys // tiles.tile_px).astype(int) * tiles.tiles_x + (xs // tiles.tile_px).astype(int)
    bound = np.zeros((h, w))
    for i in range(gs.count):
        dx, dy = xs - gs.mu[i, 0], ys - gs.mu[i, 1]
        a, b, c = conic[i]
        alpha = opac[i] * np.exp(-0.5 * (a * dx * dx + 2 * b * dx * dy + c * dy * dy))
        listed = np.array([i in tiles.ids[tiles.offsets[t] : tiles.offsets[t + 1]] for t in range(tiles.n_tiles)])
        bound += np.where(listed[owner] & (alpha >= cutoff), 0.0, alpha)
    return bound


def test_production_error_within_skipped_alpha():
    # colors in [0,1] => dropping a layer of opacity d moves a pixel by at most d
    rng = np.random.default_rng(12)
    for _ in range(30):
        gs = random_set(rng, int(rng.integers(1, 51)), int(rng.integers(8, 65)), int(rng.integers(8, 65)))
        tiles = build_tiles(gs, 16)
        err = np.abs(render(gs, 16, PRODUCTION, tiles) - render_reference(gs)).max(axis=2)
        assert np.all(err <= _skipped_alpha_bound(gs, tiles, ALPHA_CUTOFF) + T_MIN + 1e-12)


@pytest.mark.xfail(strict=True, reason="one primitive just under the 1/255 cutoff already contributes 3.9e-3 > 2e-3")
def test_production_cutoff_within_2e3():
    # opacity tuned so the pixel-center alpha sits just below the cutoff
    gs = one((8.0, 8.0), (2.0, 2.0), color=(1.0, 1.0, 1.0), opacity=0.999 / 255.0, w=16, h=16)
    assert np.abs(render(gs, 16, PRODUCTION) - render_reference(gs)).max() <= 2e-3


def test_deterministic_render():
    rng = np.random.default_rng(3)
    gs = random_set(rng, 500, 96, 80)
    a = render(gs)
    b = render(gs)
    assert np.array_equal(a, b)


def test_backward_zero_grad():
    rng = np.random.default_rng(1)
    gs = random_set(rng, 10, 16, 16)
    g = backward(gs, build_tiles(gs), np.zeros((16, 16, 3))).to_flat()
    assert np.all(g == 0)


def test_backward_shape_mismatch():
    gs = random_set(np.random.default_rng(0), 3, 16, 16)
    with pytest.raises(ValueError):
        backward(gs, build_tiles(gs), np.zeros((16, 15, 3)))


def test_backward_single_color():
    gs = one((8.0, 8.0), (2.0, 3.0), theta=0.3, opacity=0.8, w=16, h=16)
    rng = np.random.default_rng(0)
    g_img = np.zeros((16, 16, 3))
    g_img[..., 0] = rng.normal(size=(16, 16))
    alpha = render_reference(gs.with_colors(np.ones((1, 3))))[..., 0]
    d = backward(gs, build_tiles(gs, 16, math.inf), g_img, settings=EXACT).d_color[0]
    assert d[0] == pytest.approx((g_img[..., 0] * alpha).sum(), rel=1e-10)
    assert d[1] == 0.0 and d[2] == 0.0


def test_backward_uncovered_zero():
    gs = random_set(np.random.default_rng(8), 4, 16, 16)
    gs.mu[2] = [500.0, 500.0]
    gs.scale_raw[2] = [0.0, 0.0]
    g = backward(gs, build_tiles(gs), np.ones((16, 16, 3)))
    for block in (g.d_mu, g.d_scale_raw, g.d_theta, g.d_color, g.d_opacity_raw):
        assert np.all(block[2] == 0)


def test_backward_finite_differences_all_attributes():
    rng = np.random.default_rng(21)
    errs = {k: [] for k in ("mu", "scale_raw", "theta", "color", "opacity_raw")}
    for trial in range(6):
        gs = random_set(rng, 10, 16, 16, scale_mu=1.0, scale_sd=0.5, opacity_sd=1.0)
        g_img = rng.normal(size=(16, 16, 3))
        tiles = build_tiles(gs, 16, math.inf)
        grads = backward(gs, tiles, g_img, settings=EXACT)
        for name in errs:
            x = getattr(gs, name)

            def loss(_x):
                return float((render(gs, 16, EXACT, tiles) * g_img).sum())

            g = getattr(grads, "d_" + name)
            idx = rng.choice(x.size, min(x.size, 10), replace=False)
            errs[name] += fd_coords(loss, x, g, idx)
    for name, e in errs.items():
        assert len(e) >= 50, name
        assert max(e) <= 1e-4, (name, max(e))


def test_backward_freeze_geometry_exact_zero():
    rng = np.random.default_rng(5)
    gs = random_set(rng, 30, 32, 32)
    g = backward(gs, build_tiles(gs), rng.normal(size=(32, 32, 3)), freeze_geometry=True)
    assert np.all(g.d_mu == 0) and np.all(g.d_scale_raw == 0) and np.all(g.d_theta == 0)
    full = backward(gs, build_tiles(gs), rng.normal(size=(32, 32, 3)))
    assert np.any(full.d_mu != 0)


def test_backward_freeze_matches_color_grad():
    rng = np.random.default_rng(6)
    gs = random_set(rng, 30, 32, 32)
    g_img = rng.normal(size=(32, 32, 3))
    t = build_tiles(gs)
    a = backward(gs, t, g_img, freeze_geometry=True)
    b = backward(gs, t, g_img)
    assert np.allclose(a.d_color, b.d_color, rtol=1e-12, atol=1e-14)
    assert np.allclose(a.d_opacity_raw, b.d_opacity_raw, rtol=1e-12, atol=1e-14)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_adam_step_decreases_l2(seed):
    rng = np.random.default_rng(seed)
    gs = random_set(rng, int(rng.integers(1, 20)), 24, 24)
    target = rng.uniform(0, 1, (24, 24, 3))
    tiles = build_tiles(gs)
    img = render(gs, tiles=tiles)
    loss0 = float(((img - target) ** 2).sum())
    g = backward(gs, tiles, 2 * (img - target)).to_flat()
    x = adam_step(gs.to_flat(), g, AdamState.zeros(g.size), lr=1e-6)
    stepped = gs.copy()
    stepped.load_flat(x)
    assert float(((render(stepped, tiles=tiles) - target) ** 2).sum()) < loss0
