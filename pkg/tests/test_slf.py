import numpy as np
import pytest

from plumekit import landcover, slf
from plumekit.errors import (
    DegenerateWindow,
    DimensionMismatch,
    MissingClassStats,
    ZeroDenominator,
)
from plumekit.hsi_io import GltMap

from conftest import make_cube


def one_class_map(height, width):
    return landcover.ClassMap(
        labels=np.zeros((height, width), dtype=np.int32),
        counts=np.array([height * width], dtype=np.int64),
        chain=np.array([0], dtype=np.int32),
    )


def naive_slf(cube, cm, stats, t):
    """Triple-loop reference: explicit inverse, one pixel at a time."""
    height, width, bands = cube.shape
    out = np.zeros((height, width))
    tvec = np.asarray(getattr(t, "values", t), dtype=float)
    for i in range(height):
        for j in range(width):
            k = cm.labels[i, j]
            if k < 0:
                continue
            x = cube.read_pixel(i, j)
            if np.any(x == cube.meta.no_data_value):
                continue
            cinv = np.linalg.inv(stats.covs[k] + stats.eps[k] * np.eye(bands))
            a = cinv @ tvec
            out[i, j] = (x - stats.means[k]) @ a / np.sqrt(tvec @ a)
    return out


def small_signature(bands, rng=None):
    t = np.zeros(bands)
    tail = max(bands // 3, 2)
    ramp = np.linspace(0.2, 1.0, tail)
    t[-tail:] = -np.concatenate([ramp[: tail // 2 + tail % 2], ramp[: tail // 2][::-1]])
    return t


def test_traditional_isotropic_closed_form():
    rng = np.random.default_rng(0)
    bands, sigma, amp = 8, 0.5, 2.0
    n_rows = 10_000
    mu = rng.uniform(2, 4, size=bands)
    t = small_signature(bands)
    data = rng.normal(0, sigma, size=(n_rows, 10, bands)) + mu
    data[0, 0] = mu + amp * t  # injected plume pixel
    cube = make_cube(data, 500 + 10 * np.arange(bands))
    emap = slf.matched_filter_traditional(cube, t, column_window=10)
    expected = amp * np.linalg.norm(t) / sigma
    assert emap.values[0, 0] == pytest.approx(expected, rel=0.05)


def test_traditional_zero_scores_at_mean():
    bands = 5
    mu = np.linspace(1, 2, bands)
    data = np.tile(mu, (6, 6, 1))
    cube = make_cube(data, 500 + 10 * np.arange(bands))
    emap = slf.matched_filter_traditional(cube, small_signature(bands), column_window=6)
    np.testing.assert_allclose(emap.values, 0.0, atol=1e-12)
    assert emap.valid.all()


def test_traditional_scale_invariance():
    rng = np.random.default_rng(1)
    bands = 6
    data = rng.uniform(1, 5, size=(40, 12, bands))
    t = small_signature(bands)
    wl = 500 + 10 * np.arange(bands)
    base = slf.matched_filter_traditional(make_cube(data, wl), t, column_window=4)
    scaled = slf.matched_filter_traditional(make_cube(3.0 * data, wl), t, column_window=4)
    np.testing.assert_allclose(scaled.values, base.values, rtol=1e-9, atol=1e-12)


def test_traditional_degenerate_window():
    data = np.ones((1, 2, 3))
    data[0, 0, :] = -9999.0  # one valid pixel in the only window
    cube = make_cube(data, [500, 600, 700])
    with pytest.raises(DegenerateWindow):
        slf.matched_filter_traditional(cube, small_signature(3), column_window=2)


def test_slf_reduces_to_traditional_bitwise():
    rng = np.random.default_rng(2)
    bands = 7
    data = rng.uniform(1, 6, size=(25, 9, bands))
    wl = 500 + 10 * np.arange(bands)
    cube = make_cube(data, wl)
    t = small_signature(bands)
    trad = slf.matched_filter_traditional(cube, t, column_window=9)
    cm = one_class_map(25, 9)
    stats = landcover.class_stats(cube, cm)
    ours = slf.slf_enhance(cube, cm, stats, t)
    assert ours.values.tobytes() == trad.values.tobytes()


def test_slf_isotropic_closed_form():
    rng = np.random.default_rng(3)
    bands, sigma, amp = 8, 0.3, 1.5
    data = rng.normal(0, sigma, size=(2000, 50, bands)) + 5.0
    data[10, 10] = 5.0 + amp * small_signature(bands)
    cube = make_cube(data, 500 + 5 * np.arange(bands))
    cm = one_class_map(2000, 50)
    stats = landcover.class_stats(cube, cm)
    emap = slf.slf_enhance(cube, cm, stats, small_signature(bands))
    expected = amp * np.linalg.norm(small_signature(bands)) / sigma
    assert emap.values[10, 10] == pytest.approx(expected, rel=0.05)


def test_slf_standardization_background_only():
    rng = np.random.default_rng(4)
    bands = 6
    mix = rng.normal(size=(bands, bands)) * 0.2 + np.eye(bands)
    data = rng.normal(size=(100_000, 1, bands)) @ mix.T + 3.0
    cube = make_cube(data, 500 + 10 * np.arange(bands))
    cm = one_class_map(100_000, 1)
    stats = landcover.class_stats(cube, cm)
    emap = slf.slf_enhance(cube, cm, stats, small_signature(bands))
    scores = emap.values[emap.valid]
    assert abs(scores.mean()) < 0.02
    assert abs(scores.var() - 1.0) < 0.05


def test_slf_shift_and_scale_invariance():
    rng = np.random.default_rng(5)
    bands = 5
    data = rng.uniform(1, 4, size=(300, 4, bands))
    wl = 500 + 10 * np.arange(bands)
    t = small_signature(bands)
    cm = one_class_map(300, 4)

    def run(arr):
        cube = make_cube(arr, wl)
        stats = landcover.class_stats(cube, cm)
        return slf.slf_enhance(cube, cm, stats, t).values

    base = run(data)
    np.testing.assert_allclose(run(data + 7.5), base, rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(run(data * 4.2), base, rtol=1e-9, atol=1e-9)


def test_slf_oracle_equivalence_small_cubes():
    rng = np.random.default_rng(6)
    for trial in range(5):
        h, w, bands = 12, 10, 6
        data = rng.uniform(0.5, 6, size=(h, w, bands))
        labels = rng.integers(0, 3, size=(h, w)).astype(np.int32)
        cube = make_cube(data, 500 + 10 * np.arange(bands))
        cm = landcover.ClassMap(labels=labels,
                                counts=np.bincount(labels.ravel(), minlength=3),
                                chain=np.arange(3, dtype=np.int32))
        stats = landcover.class_stats(cube, cm)
        t = small_signature(bands)
        fast = slf.slf_enhance(cube, cm, stats, t)
        ref = naive_slf(cube, cm, stats, t)
        np.testing.assert_allclose(fast.values, ref, atol=1e-10)


def test_slf_invalid_pixels_stay_invalid():
    bands = 4
    rng = np.random.default_rng(7)
    data = rng.uniform(1, 2, size=(20, 5, bands))
    data[3, 3, :] = -9999.0
    labels = np.zeros((20, 5), dtype=np.int32)
    labels[0, 0] = -1
    cube = make_cube(data, [500, 600, 700, 800])
    cm = landcover.ClassMap(labels=labels, counts=np.array([99]),
                            chain=np.array([0], dtype=np.int32))
    stats = landcover.class_stats(cube, cm)
    emap = slf.slf_enhance(cube, cm, stats, small_signature(bands))
    assert not emap.valid[3, 3]
    assert not emap.valid[0, 0]
    assert np.isfinite(emap.values[emap.valid]).all()


def test_slf_missing_class_stats():
    data = np.ones((4, 4, 3))
    cube = make_cube(data, [500, 600, 700])
    labels = np.ones((4, 4), dtype=np.int32)  # class 1 but stats only cover class 0
    cm = landcover.ClassMap(labels=labels, counts=np.array([0, 16]),
                            chain=np.array([0, 1], dtype=np.int32))
    stats = landcover.class_stats(make_cube(np.random.default_rng(0).uniform(1, 2, (4, 4, 3)), [500, 600, 700]),
                                  one_class_map(4, 4))
    with pytest.raises(MissingClassStats):
        slf.slf_enhance(cube, cm, stats, small_signature(3))


def two_terrain_scene(seed=11, height=80, width=40, bands=12, amp=None):
    """Quiet vegetation-like lower half, noisy soil-like upper half."""
    rng = np.random.default_rng(seed)
    t = small_signature(bands)
    mu_a = np.full(bands, 5.0)
    mu_b = np.full(bands, 2.0) + 0.8 * np.abs(t)  # mean split leans into t
    sigma_a, sigma_b = 0.6, 0.12
    amp = amp if amp is not None else 6 * sigma_b
    half = height // 2
    data = np.empty((height, width, bands))
    data[:half] = rng.normal(0, sigma_a, size=(half, width, bands)) + mu_a
    data[half:] = rng.normal(0, sigma_b, size=(height - half, width, bands)) + mu_b
    plume = np.zeros((height, width), dtype=bool)
    plume[half + 5:half + 15, 10:20] = True
    data[plume] += amp * t
    labels = np.zeros((height, width), dtype=np.int32)
    labels[half:] = 1
    cm = landcover.ClassMap(labels=labels,
                            counts=np.bincount(labels.ravel(), minlength=2),
                            chain=np.arange(2, dtype=np.int32))
    cube = make_cube(data, 500 + 10 * np.arange(bands))
    return cube, cm, t, plume


def separation(emap, plume):
    bg = emap.values[emap.valid & ~plume]
    pl = emap.values[emap.valid & plume]
    return (pl.mean() - bg.mean()) / bg.std()


def test_slf_beats_traditional_on_two_terrains():
    cube, cm, t, plume = two_terrain_scene()
    stats = landcover.class_stats(cube, cm)
    sep_slf = separation(slf.slf_enhance(cube, cm, stats, t), plume)
    sep_trad = separation(slf.matched_filter_traditional(cube, t, column_window=11), plume)
    assert sep_slf > 0 and sep_trad > 0
    assert sep_slf >= 1.2 * sep_trad


# --- sensor grouping ---

def glt_from_cols(orig_col):
    orig_col = np.asarray(orig_col, dtype=np.int32)
    rows = np.ones_like(orig_col)
    rows[orig_col == 0] = 0
    return GltMap(orig_col=orig_col, orig_row=rows)


def test_sensor_groups_full_span():
    glt = glt_from_cols([[1, 100, 598]])
    grouping = slf.sensor_groups(glt, window=598)
    np.testing.assert_array_equal(grouping.ids, [[0, 0, 0]])


def test_sensor_groups_window_11():
    cols = np.arange(1, 13)[None, :]
    grouping = slf.sensor_groups(glt_from_cols(cols), window=11)
    np.testing.assert_array_equal(grouping.ids[0, :11], 0)
    assert grouping.ids[0, 11] == 1


def test_sensor_groups_unmapped():
    grouping = slf.sensor_groups(glt_from_cols([[0, 5]]), window=11)
    assert grouping.ids[0, 0] == -1
    assert grouping.ids[0, 1] == 0


def test_slf_grouped_standardizes_per_window():
    rng = np.random.default_rng(13)
    height, width, bands = 400, 8, 5
    base = rng.normal(0, 0.2, size=(height, width, bands)) + 3.0
    # sensor columns 1..8 -> two windows of 4 with different radiometric bias
    orig_col = np.tile(np.arange(1, width + 1)[None, :], (height, 1))
    bias = np.where(orig_col[:, :, None] <= 4, 0.0, 1.5)
    data = base + bias
    cube = make_cube(data, 500 + 10 * np.arange(bands))
    glt = GltMap(orig_col=orig_col.astype(np.int32),
                 orig_row=np.ones_like(orig_col, dtype=np.int32))
    grouping = slf.sensor_groups(glt, window=4)
    cm = one_class_map(height, width)
    stats = landcover.class_stats(cube, cm)
    t = small_signature(bands)
    grouped = slf.slf_enhance(cube, cm, stats, t, grouping=grouping,
                              min_cell_samples=100)
    for w in (0, 1):
        scores = grouped.values[grouping.ids == w]
        assert abs(scores.mean()) < 0.05
        assert abs(scores.var() - 1.0) < 0.1


def test_slf_grouped_fallback_matches_class_only():
    rng = np.random.default_rng(14)
    data = rng.uniform(1, 3, size=(30, 6, 4))
    cube = make_cube(data, [500, 600, 700, 800])
    orig_col = np.tile(np.arange(1, 7)[None, :], (30, 1)).astype(np.int32)
    glt = GltMap(orig_col=orig_col, orig_row=np.ones_like(orig_col))
    grouping = slf.sensor_groups(glt, window=3)
    cm = one_class_map(30, 6)
    stats = landcover.class_stats(cube, cm)
    t = small_signature(4)
    plain = slf.slf_enhance(cube, cm, stats, t)
    huge_floor = slf.slf_enhance(cube, cm, stats, t, grouping=grouping,
                                 min_cell_samples=10**9)
    np.testing.assert_array_equal(plain.values, huge_floor.values)


# --- MGR diagnostic ---

def random_spd(rng, n):
    m = rng.normal(size=(n, n))
    return m @ m.T + n * np.eye(n)


def test_mgr_optimal_alpha_attains_quadratic_form():
    rng = np.random.default_rng(15)
    n = 6
    cov = random_spd(rng, n)
    t = small_signature(n)
    quad = t @ np.linalg.solve(cov, t)
    alpha = np.linalg.solve(cov, t) / np.sqrt(quad)
    assert slf.mgr(alpha, t, cov) == pytest.approx(quad, rel=1e-10)


def test_mgr_scale_invariant():
    rng = np.random.default_rng(16)
    cov = random_spd(rng, 5)
    t = small_signature(5)
    alpha = rng.normal(size=5)
    base = slf.mgr(alpha, t, cov)
    for s in (-3.0, 0.5, 100.0):
        assert slf.mgr(s * alpha, t, cov) == pytest.approx(base, abs=1e-12 * max(base, 1))


def test_mgr_random_below_optimal():
    rng = np.random.default_rng(17)
    n = 6
    cov = random_spd(rng, n)
    t = small_signature(n)
    best = t @ np.linalg.solve(cov, t)
    for _ in range(100):
        alpha = rng.normal(size=n)
        assert slf.mgr(alpha, t, cov) <= best + 1e-9


def test_mgr_zero_denominator():
    with pytest.raises(ZeroDenominator):
        slf.mgr(np.zeros(3), small_signature(3), np.eye(3))


def test_signature_length_mismatch():
    data = np.ones((4, 4, 3))
    cube = make_cube(data, [500, 600, 700])
    cm = one_class_map(4, 4)
    with pytest.raises(DimensionMismatch):
        slf.matched_filter_traditional(cube, np.ones(5), column_window=2)
