import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from docdewarp import grid as wg
from docdewarp.errors import DimensionError, MetricError
from docdewarp.metrics import (
    MS_SSIM_WEIGHTS,
    MetricsReport,
    SampleMetrics,
    combine_levels,
    local_distortion,
    ms_ssim,
    pyramid_down,
    pyramid_ssim,
    ssim,
    to_gray,
)
from docdewarp.synth import synthetic_page


def direct_ssim_11(x, y):
    """Single-window SSIM written out from the definition (no filtering helpers)."""
    c = np.arange(11) - 5.0
    g1 = np.exp(-c ** 2 / (2 * 1.5 ** 2))
    w = np.outer(g1, g1)
    w /= w.sum()
    mx, my = (w * x).sum(), (w * y).sum()
    vx = (w * (x - mx) ** 2).sum()
    vy = (w * (y - my) ** 2).sum()
    cxy = (w * (x - mx) * (y - my)).sum()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))


def text_image(seed=0, size=256):
    return to_gray(synthetic_page(np.random.default_rng(seed), size))


# ---------------------------------------------------------------- ssim

def test_ssim_self_is_one():
    x = np.random.default_rng(0).random((64, 48))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_ssim_matches_direct_formula_on_11x11(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.random((11, 11)), rng.random((11, 11))
    assert ssim(x, y) == pytest.approx(direct_ssim_11(x, y), abs=1e-10)


def test_ssim_checkerboard_against_inverse():
    x = (np.indices((11, 11)).sum(0) % 2).astype(float)
    value = ssim(x, 1 - x)
    assert value == pytest.approx(direct_ssim_11(x, 1 - x), abs=1e-10)
    assert value < 0.2


def test_ssim_constant_images_luminance_only():
    a, b = np.full((20, 20), 0.3), np.full((20, 20), 0.31)
    c1 = 0.01 ** 2
    assert ssim(a, b) == pytest.approx((2 * 0.3 * 0.31 + c1) / (0.3 ** 2 + 0.31 ** 2 + c1), abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_ssim_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((24, 30)), rng.random((24, 30))
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
    assert -1.0 <= ssim(a, b) <= 1.0


def test_ssim_size_mismatch():
    with pytest.raises(DimensionError):
        ssim(np.zeros((12, 12)), np.zeros((12, 13)))


def test_rgb_converts_with_601_luma():
    rgb = np.zeros((2, 2, 3), dtype=np.uint8)
    rgb[..., 1] = 255
    np.testing.assert_allclose(to_gray(rgb), 0.587)


# ---------------------------------------------------------------- pyramid

def test_pyramid_identical_is_all_ones():
    x = text_image(1)
    np.testing.assert_allclose(pyramid_ssim(x, x), [1.0] * 5, atol=1e-9)


def test_pyramid_level_one_is_plain_ssim():
    rng = np.random.default_rng(2)
    a, b = rng.random((64, 64)), rng.random((64, 64))
    assert pyramid_ssim(a, b)[0] == ssim(a, b)


def test_pyramid_shift_forgiven_with_blur():
    x = text_image(3)
    shifted = np.roll(x, 1, axis=1)
    levels = pyramid_ssim(x, shifted)
    assert all(b >= a for a, b in zip(levels, levels[1:]))


def test_pyramid_down_halves_and_preserves_constants():
    out = pyramid_down(np.full((16, 10), 0.4))
    assert out.shape == (8, 5)
    np.testing.assert_allclose(out, 0.4, atol=1e-15)


def test_small_level_uses_fallback_window():
    # 128 px halves to 8 px at level 5, below the 11-px window
    rng = np.random.default_rng(4)
    a, b = rng.random((128, 128)), rng.random((128, 128))
    levels = pyramid_ssim(a, b)
    assert len(levels) == 5 and all(np.isfinite(levels))
    with pytest.raises(MetricError):
        pyramid_ssim(rng.random((32, 32)), rng.random((32, 32)))


# ---------------------------------------------------------------- ms-ssim

def test_weights_sum():
    assert sum(MS_SSIM_WEIGHTS) == pytest.approx(1.0001, abs=1e-12)


def test_ms_ssim_self_is_one():
    x = text_image(5)
    assert ms_ssim(x, x) == pytest.approx(1.0, abs=1e-6)
    assert ms_ssim(x, x, mode="product") == pytest.approx(1.0, abs=1e-6)


def test_weighted_average_example():
    levels = [0.8, 0.9, 0.95, 0.99, 1.0]
    exact = (0.0448 * 0.8 + 0.2856 * 0.9 + 0.3001 * 0.95 + 0.2363 * 0.99 + 0.1333 * 1.0) / 1.0001
    assert combine_levels(levels) == pytest.approx(exact, abs=1e-15)
    assert combine_levels(levels) == pytest.approx(0.9451174882511749, abs=1e-12)


def test_ms_ssim_is_combination_of_levels():
    a, b = text_image(6), text_image(7)
    assert ms_ssim(a, b) == pytest.approx(combine_levels(pyramid_ssim(a, b)), abs=1e-15)


def test_ms_ssim_unknown_mode():
    x = np.zeros((200, 200))
    with pytest.raises(ValueError):
        ms_ssim(x, x, mode="median")


# ---------------------------------------------------------------- local distortion

def test_ld_identical_is_zero():
    g = wg.identity_grid(32, 32)
    assert local_distortion(g, g) == 0.0


def test_ld_one_pixel_offset():
    g = wg.identity_grid(256, 256)
    shifted = g.copy()
    shifted[..., 0] += 2.0 / 255.0
    assert local_distortion(shifted, g) == pytest.approx(1.0, abs=1e-12)
    # a 2/256 offset is just under one pixel with border-centered coordinates
    shifted = g.copy()
    shifted[..., 0] += 0.0078125
    assert local_distortion(shifted, g) == pytest.approx(0.99609375, abs=1e-12)


def test_ld_random_grids_are_far():
    rng = np.random.default_rng(8)
    a, b = rng.uniform(-1, 1, (64, 64, 2)), rng.uniform(-1, 1, (64, 64, 2))
    assert local_distortion(a, b, source_size=(256, 256)) > 50.0


def test_ld_mask_and_shape_errors():
    g = wg.identity_grid(8, 8)
    h = g.copy()
    h[:4] += 0.5
    mask = np.zeros((8, 8), dtype=bool)
    mask[4:] = True
    assert local_distortion(h, g, mask=mask) == 0.0
    with pytest.raises(DimensionError):
        local_distortion(g, wg.identity_grid(8, 9))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_ld_is_a_metric(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (rng.uniform(-1, 1, (6, 7, 2)) for _ in range(3))
    ab, ba = local_distortion(a, b), local_distortion(b, a)
    assert ab == pytest.approx(ba, abs=1e-12) and ab > 0
    assert local_distortion(a, c) <= ab + local_distortion(b, c) + 1e-9


# ---------------------------------------------------------------- report

def test_report_csv_and_means():
    rep = MetricsReport()
    rep.add(SampleMetrics("s0", [0.5, 0.6, 0.7, 0.8, 0.9], 0.75, 2.0))
    rep.add(SampleMetrics("s1", [0.7, 0.8, 0.9, 1.0, 1.0], 0.85, None))
    lines = rep.to_csv().splitlines()
    assert lines[0] == "sample,ssim_l1,ssim_l2,ssim_l3,ssim_l4,ssim_l5,ms_ssim,ld"
    assert lines[2].endswith(",")
    assert rep.mean_ms_ssim == pytest.approx(0.8)
    assert rep.mean_ld == 2.0
    np.testing.assert_allclose(rep.mean_ssim_levels, [0.6, 0.7, 0.8, 0.9, 0.95])
    assert "mean" in rep.table()
