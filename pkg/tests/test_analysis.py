import csv

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from imcbn.analysis import DegenerateCloud, PCA_COLUMNS, dist_stats, pc2_projected, pca2, pca_rows, write_csv
from imcbn.device import QuantSpec, get_device, quantize_layer
from imcbn.xbar import XbarConfig, apply_drift, apply_read_noise, map_layer, reconstruct_weights
from oracles import pca_proportions

arrays = st.lists(st.floats(-50, 50, allow_nan=False), min_size=3, max_size=40)


def test_identity_cloud():
    w = np.random.default_rng(0).standard_normal(1000)
    r = pca2(w, w)
    assert r.pc1 == 1.0 and abs(r.pc2) <= 1e-12


def test_hand_four_points():
    r = pca2([1, -1, 0, 0], [0, 0, 0.5, -0.5])
    assert r.pc1 == pytest.approx(0.8, abs=1e-12)
    assert r.pc2 == pytest.approx(0.2, abs=1e-12)
    assert r.eig1 == pytest.approx(0.5) and r.eig2 == pytest.approx(0.125)
    assert r.n == 4


@pytest.mark.parametrize("c", [-3.0, 0.1, 2.0, 1e4])
def test_scaled_copy_has_no_pc2(c):
    w = np.random.default_rng(1).standard_normal(500)
    assert pca2(w, c * w).pc2 <= 1e-12


def test_degenerate_and_bad_input():
    with pytest.raises(DegenerateCloud):
        pca2([1, 1, 1], [2, 2, 2])
    with pytest.raises(ValueError):
        pca2([1, 2], [1, 2, 3])
    with pytest.raises(ValueError):
        pca2([1], [1])


@settings(max_examples=200)
@given(arrays, st.integers(0, 2**31 - 1))
def test_matches_general_eigensolver(xs, seed):
    x = np.array(xs)
    y = x * 0.7 + np.random.default_rng(seed).standard_normal(x.size)
    assume(np.var(x) + np.var(y) > 1e-9)
    r = pca2(x, y)
    ref = pca_proportions(x, y)
    assert r.pc1 == pytest.approx(ref[0], abs=1e-9)
    assert r.pc2 == pytest.approx(ref[1], abs=1e-9)
    assert r.pc1 + r.pc2 == pytest.approx(1.0, abs=1e-12)
    assert r.pc1 >= r.pc2 >= 0


@settings(max_examples=100)
@given(arrays, st.integers(0, 2**31 - 1), st.sampled_from([-10.0, 1e-3, 10.0, 1e5]))
def test_swap_and_scale_invariance(xs, seed, k):
    x = np.array(xs)
    y = np.random.default_rng(seed).standard_normal(x.size)
    assume(np.var(x) > 1e-6)
    base = pca2(x, y).pc2
    assert pca2(y, x).pc2 == pytest.approx(base, abs=1e-12)
    assert pca2(k * x, k * y).pc2 == pytest.approx(base, abs=1e-12)


def test_collinear_iff_zero_pc2():
    x = np.linspace(-1, 1, 50)
    assert pca2(x, 3 * x - 2).pc2 <= 1e-12
    y = 3 * x - 2
    y[7] += 1e-3
    assert pca2(x, y).pc2 > 1e-12


def test_pc2_projected():
    assert pc2_projected(0.3, 1.0, 1.0, 0.1) == 0.3
    assert pc2_projected(1e-3, 1e10, 1.0, 0.1) == pytest.approx(1e-2, rel=1e-12)
    for t in (1.0, 10.0, 1e8):
        assert pc2_projected(0.05, t, 1.0, 0.0) == 0.05


# --- distribution stats ---------------------------------------------------

def test_dist_stats_constant():
    s = dist_stats(np.full(10, 2.5), 5)
    assert s.std == 0 and s.min == s.max == s.mean == 2.5
    assert (s.counts > 0).sum() == 1 and s.n == 10


def test_dist_stats_uniform_grid():
    # integers 0..99 in 10 bins of width 9.9: bin k holds 10k..10k+9, the last bin is closed
    s = dist_stats(np.arange(100.0), 10)
    assert s.counts.tolist() == [10] * 10
    assert s.edges[0] == 0 and s.edges[-1] == 99
    assert s.n == 100 and s.mean == pytest.approx(49.5, abs=1e-12)


@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=60), st.integers(1, 20))
def test_dist_stats_invariants(vals, bins):
    s = dist_stats(np.array(vals), bins)
    assert s.counts.sum() == len(vals)
    assert s.min <= s.mean + 1e-9 and s.mean <= s.max + 1e-9


def test_pure_drift_range_ratio():
    d = get_device("FeFET")
    w = np.random.default_rng(0).standard_normal((16, 8, 3, 3))
    c = 0.1 ** 0.5
    w_ni = reconstruct_weights(apply_drift(map_layer(w, QuantSpec(), d, XbarConfig()), 1e5, 1.0, 0.1))
    wq = quantize_layer(w).dequantize()
    ideal, ni = dist_stats(wq), dist_stats(w_ni)
    # affine with slope c, so the range shrinks by exactly c
    assert (ni.max - ni.min) / (ideal.max - ideal.min) == pytest.approx(c, rel=1e-5)
    assert pca2(wq, w_ni).pc2 == pytest.approx(0.0, abs=1e-9)


# --- noise trends ---------------------------------------------------------

def _pc2_at(d, w, seed):
    grid = map_layer(w, QuantSpec(), d, XbarConfig())
    return pca2(quantize_layer(w).dequantize(), reconstruct_weights(apply_read_noise(grid, seed))).pc2


def _pc2_additive(r):
    # cloud (w, w + n) with var(n) / var(w) = r
    return (2 + r - np.sqrt(r * r + 4)) / (2 * (2 + r))


def test_pc2_additive_noise_closed_form():
    rng = np.random.default_rng(8)
    w = rng.standard_normal(400_000)
    for r in (0.1, 1.0, 2.0, 6.0):
        cloud = pca2(w, w + np.sqrt(r) * rng.standard_normal(w.size)).pc2
        assert cloud == pytest.approx(_pc2_additive(r), abs=2e-3)
    grid = np.linspace(0, 20, 2001)
    assert grid[np.argmax(_pc2_additive(grid))] == pytest.approx(2.0, abs=0.01)
    assert _pc2_additive(2.0) == pytest.approx((2 - np.sqrt(2)) / 4, abs=1e-12)


def test_pc2_rises_with_sigma_below_peak():
    w = np.random.default_rng(4).standard_normal((256, 32, 3, 3)) * 0.1  # >1e5 weights
    fe = get_device("FeFET")
    vals = [_pc2_at(fe.with_sigma(s), w, 0) for s in (0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35)]
    assert all(b > a for a, b in zip(vals[:4], vals[1:4]))
    # additive noise can never push PC2 past the r = 2 maximum
    assert max(vals) <= (2 - np.sqrt(2)) / 4 + 2e-3


def test_wider_on_off_ratio_lowers_pc2():
    w = np.random.default_rng(5).standard_normal((64, 64, 3, 3)) * 0.1
    pcm_i, pcm_ii = get_device("PCM-i"), get_device("PCM-ii")
    assert _pc2_at(pcm_ii, w, 1) < _pc2_at(pcm_i, w, 1)


# --- CSV export -----------------------------------------------------------

def test_pca_rows_and_csv(tmp_path):
    w = np.random.default_rng(0).standard_normal(100)
    pairs = {"conv1": (w, w + 0.1 * np.sin(w)), "conv2": (w, 2 * w)}
    rows = pca_rows(pairs, t=1e4, t0=1.0, nu=0.1)
    assert [r["layer_id"] for r in rows] == ["conv1", "conv2"]
    assert rows[0]["pc2_proj"] == pytest.approx(rows[0]["pc2"] * 10 ** 0.4)
    p = tmp_path / "pca.csv"
    write_csv(p, rows, PCA_COLUMNS)
    with p.open() as f:
        got = list(csv.DictReader(f))
    assert list(got[0]) == PCA_COLUMNS
    assert float(got[1]["pc2"]) == rows[1]["pc2"]
    assert p.read_text().splitlines()[0] == ",".join(PCA_COLUMNS)
