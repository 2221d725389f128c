import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from imcbn.device import QuantSpec, get_device, quantize_layer
from imcbn.tensor import param_checksum
from imcbn.tune import evaluate
from imcbn.xbar import (
    NoiseConfig, XbarConfig, _tile_rng, apply_drift, apply_parasitics, apply_read_noise, deploy_layer,
    deploy_network, effective_conductance_parasitic, ideal_mac, map_layer, reconstruct_weights,
)
from oracles import dense_crossbar_currents, dense_effective_conductance

Q = QuantSpec()
XB = XbarConfig()
ZERO = dict(rdriver=0.0, rwire_row=0.0, rwire_col=0.0, rsense=0.0)


# --- mapping ---------------------------------------------------------------

def test_tiling_grid_shape():
    g = map_layer(np.ones((64, 64, 3, 3)), Q, get_device("RRAM"), XB)
    assert g.grid_shape == (9, 1)
    assert g.matrix_shape == (576, 64)


def test_partial_tile_padding():
    g = map_layer(np.random.default_rng(0).standard_normal((16, 3, 3, 3)), Q, get_device("RRAM"), XB)
    assert g.grid_shape == (1, 1) and g.matrix_shape == (27, 16)
    mask = g.mask[0, 0]
    assert mask.sum() == 27 * 16
    assert (~mask.any(axis=1)).sum() == 37 and (~mask.any(axis=0)).sum() == 48
    # padding carries slice level 0
    assert np.all(g.g[0, 0][:, ~mask] == get_device("RRAM").g_min)


def test_mask_counts_match_matrix():
    g = map_layer(np.ones((70, 10, 3, 3)), Q, get_device("FeFET"), XB)
    assert g.mask.sum() == 90 * 70


def test_zero_weights_encode_offset():
    d = get_device("RRAM")
    g = map_layer(np.zeros((4, 2, 3, 3)), Q, d, XB)
    m = g.mask[0, 0]
    assert np.allclose(g.g[0, 0, 0][m], d.g_min + 8 * d.step)
    assert np.allclose(g.g[0, 0, 1][m], d.g_min)


def test_map_layer_rejects_non_4d():
    with pytest.raises(ValueError, match="4-D"):
        map_layer(np.ones((3, 3)), Q, get_device("RRAM"), XB)


@pytest.mark.parametrize("shape", [(16, 1, 3, 3), (32, 16, 3, 3), (80, 8, 3, 3)])
@pytest.mark.parametrize("dev", ["FeFET", "RRAM", "PCM-i"])
def test_noiseless_roundtrip_is_quantization(shape, dev):
    w = np.random.default_rng(1).standard_normal(shape).astype(np.float32)
    got = reconstruct_weights(map_layer(w, Q, get_device(dev), XB))
    np.testing.assert_allclose(got, quantize_layer(w, Q).dequantize(), rtol=0, atol=1e-6 * np.abs(w).max())


def test_reconstruct_metadata_mismatch():
    grid = map_layer(np.ones((4, 2, 3, 3)), Q, get_device("RRAM"), XB)
    with pytest.raises(ValueError):
        reconstruct_weights(grid, grid.g[:, :, :1])


# --- read noise ------------------------------------------------------------

def test_read_noise_zero_sigma_identity():
    d = get_device("FeFET").with_sigma(0.0)
    grid = map_layer(np.random.default_rng(0).standard_normal((8, 4, 3, 3)), Q, d, XB)
    assert np.array_equal(apply_read_noise(grid, 7).g, grid.g)


def test_read_noise_same_seed_identical():
    grid = map_layer(np.random.default_rng(0).standard_normal((8, 4, 3, 3)), Q, get_device("FeFET"), XB)
    a, b = apply_read_noise(grid, 3), apply_read_noise(grid, 3)
    assert a.g.tobytes() == b.g.tobytes()
    assert not np.array_equal(a.g, apply_read_noise(grid, 4).g)


def test_read_noise_statistics():
    d = get_device("RRAM")
    w = np.random.default_rng(0).standard_normal((512, 128, 3, 3))  # 18 x 8 tiles x 2 slices
    grid = map_layer(w, Q, d, XB)
    noisy = apply_read_noise(grid, 11)
    diff = (noisy.g - grid.g).ravel()
    assert diff.size >= 1_000_000
    sigma = 0.1 * (d.g_max - d.g_min)
    assert abs(diff.mean()) <= 4 * sigma / np.sqrt(diff.size)
    assert diff.std() == pytest.approx(sigma, rel=0.01)


def test_read_noise_affine_scales_with_conductance():
    d = get_device("PCM-i")
    grid = map_layer(np.random.default_rng(0).standard_normal((64, 64, 3, 3)), Q, d, XB)
    diff = apply_read_noise(grid, 0).g - grid.g
    lo = grid.g <= d.g_min + 1e-12
    hi = grid.g >= d.g_max - 1e-9
    assert diff[lo].std() == pytest.approx(0.03 * d.g_min + 0.13, rel=0.05)
    assert diff[hi].std() > diff[lo].std()


def test_read_noise_independent_of_tile_order():
    d = get_device("FeFET")
    grid = map_layer(np.random.default_rng(2).standard_normal((70, 10, 3, 3)), Q, d, XB, layer_id=3)
    ref = apply_read_noise(grid, 9).g
    # rebuild the draws visiting tiles and slices in reverse order
    g = grid.g.copy()
    sig = 0.05 * (d.g_max - d.g_min)
    for tr in reversed(range(g.shape[0])):
        for tc in reversed(range(g.shape[1])):
            for s in reversed(range(g.shape[2])):
                g[tr, tc, s] += sig * _tile_rng(9, 3, tr, tc, s).standard_normal(g.shape[-2:])
    assert g.tobytes() == ref.tobytes()


def test_clamp_nonneg():
    d = get_device("FeFET").with_sigma(2.0)
    grid = map_layer(np.random.default_rng(0).standard_normal((8, 8, 3, 3)), Q, d, XB)
    assert apply_read_noise(grid, 0).g.min() < 0
    assert apply_read_noise(grid, 0, clamp_nonneg=True).g.min() >= 0


# --- drift -----------------------------------------------------------------

def _grid_of(values, d):
    grid = map_layer(np.zeros((1, 1, 1, 1)), QuantSpec(), d, XbarConfig(1, 1))
    return grid.with_conductances(np.full(grid.g.shape, values, dtype=np.float64))


def test_drift_examples():
    d = get_device("PCM-i")
    grid = _grid_of(100.0, d)
    assert np.allclose(apply_drift(grid, 1e5, 1.0, 0.04).g, 63.096, atol=5e-4)
    assert np.all(apply_drift(grid, 1e5, 1.0, 0.04).g / 100.0 == pytest.approx(0.63096, abs=1e-5))
    assert np.all(apply_drift(_grid_of(1.0, d), 1e10, 1.0, 0.1).g == 0.1)
    assert apply_drift(grid, 1.0, 1.0, 0.04).g.tobytes() == grid.g.tobytes()
    with pytest.raises(ValueError):
        apply_drift(grid, 0.5, 1.0, 0.04)


def test_pure_drift_is_affine_closed_form():
    d = get_device("RRAM")
    w = np.random.default_rng(5).standard_normal((16, 4, 3, 3))
    grid = map_layer(w, Q, d, XB)
    c = 0.7
    w_ni = reconstruct_weights(apply_drift(grid, 1 / c, 1.0, 1.0)).astype(np.float64)
    wq = quantize_layer(w, Q).dequantize().astype(np.float64)
    k = d.g_min / d.step
    # each slice level l -> c*l + (c-1)*k; weight picks up sum of 16**s over slices
    pred = c * wq + (c - 1) * grid.delta * (128 + 17 * k)
    np.testing.assert_allclose(w_ni, pred, atol=1e-5)


def test_single_weight_hand_trace():
    # max|w| = 0.5 so 0.25 -> level 64 -> u = 192 -> slices [12, 0]
    # RRAM: G = 2 + 12*1.2 = 16.4 and 2.0; halved: 8.2 and 1.0
    # levels: (8.2-2)/1.2 = 5.1667, (1-2)/1.2 = -0.8333; u' = 81.8333
    # w' = (81.8333 - 128) * 0.5/127
    d = get_device("RRAM")
    w = np.array([0.5, 0.25]).reshape(2, 1, 1, 1)
    grid = apply_drift(map_layer(w, Q, d, XB), 2.0, 1.0, 1.0)
    expected = ((8.2 - 2) / 1.2 * 16 + (1 - 2) / 1.2 - 128) * 0.5 / 127
    assert reconstruct_weights(grid)[1, 0, 0, 0] == pytest.approx(expected, rel=1e-6)
    assert expected == pytest.approx(-0.181758, abs=1e-6)


# --- ideal MAC and parasitic mesh -----------------------------------------

def test_ideal_mac():
    g = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert ideal_mac(g, np.array([1.0, 1.0])).tolist() == [4.0, 6.0]
    assert ideal_mac(g, np.zeros(2)).tolist() == [0.0, 0.0]


def test_parasitic_hand_point():
    gp = effective_conductance_parasitic(np.array([[20.0]]), XbarConfig(1, 1))
    assert gp[0, 0] == pytest.approx(1e6 / (2015 + 50000), abs=1e-12)
    assert gp[0, 0] == pytest.approx(19.225, abs=1e-3)


@pytest.mark.parametrize("rows,cols", [(1, 1), (4, 4), (8, 3), (64, 64)])
def test_zero_parasitics_exact(rows, cols):
    g = np.random.default_rng(rows).uniform(0.1, 20, (rows, cols))
    gp = effective_conductance_parasitic(g, XbarConfig(rows, cols, **ZERO))
    np.testing.assert_allclose(gp, g, rtol=1e-10, atol=0)
    v = np.random.default_rng(0).uniform(-1, 1, rows)
    np.testing.assert_allclose(v @ gp, ideal_mac(g, v), rtol=1e-10, atol=1e-12)


def test_tile_shape_must_match():
    with pytest.raises(ValueError):
        effective_conductance_parasitic(np.ones((3, 3)), XbarConfig(4, 4))


_res = st.one_of(st.just(0.0), st.floats(0.1, 5000.0))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), _res, _res, _res, _res, st.integers(0, 2**32 - 1))
def test_parasitics_match_dense_oracle(rows, cols, rd, rr, rc, rs, seed):
    g = np.random.default_rng(seed).uniform(2.0, 20.0, (rows, cols))
    gp = effective_conductance_parasitic(g, XbarConfig(rows, cols, rd, rr, rc, rs))
    ref = dense_effective_conductance(g, rd, rr, rc, rs)
    assert np.max(np.abs(gp - ref)) <= 1e-9 * np.max(np.abs(ref))
    # IR drop only loses current
    assert np.all(gp <= g * (1 + 1e-12))
    v = np.random.default_rng(seed + 1).uniform(0, 1, rows)
    assert np.all(v @ gp <= ideal_mac(g, v) + 1e-12)


def test_superposition_for_arbitrary_inputs():
    g = np.random.default_rng(0).uniform(2, 20, (5, 6))
    v = np.random.default_rng(1).uniform(-1, 1, 5)
    gp = effective_conductance_parasitic(g, XbarConfig(5, 6))
    np.testing.assert_allclose(v @ gp, dense_crossbar_currents(g, v, 1000, 5, 10, 1000), rtol=1e-9)


def test_larger_tiles_hurt_more():
    d = get_device("RRAM")
    w = np.random.default_rng(3).standard_normal((128, 16, 3, 3))
    wq = quantize_layer(w, Q).dequantize()
    errs = []
    for n in (64, 128):
        grid = apply_parasitics(map_layer(w, Q, d, XbarConfig(n, n)))
        errs.append(np.mean(np.abs(reconstruct_weights(grid) - wq)) / np.abs(wq).max())
    assert errs[1] >= errs[0]


# --- whole-layer / network deployment -------------------------------------

def test_deploy_layer_noise_off_is_quantization():
    w = np.random.default_rng(0).standard_normal((8, 4, 3, 3))
    grid = deploy_layer(w, get_device("PCM-ii"), Q, XB, NoiseConfig())
    np.testing.assert_allclose(reconstruct_weights(grid), quantize_layer(w).dequantize(), atol=1e-6)


def test_noise_config_validation():
    with pytest.raises(ValueError):
        NoiseConfig(drift_t=0.5, drift_t0=1.0)


def test_deploy_network_contract(small_model, small_data):
    _, _, xte, yte = small_data
    d = get_device("FeFET")
    base_bn = {k: (s.gamma.tobytes(), s.beta.tobytes(), s.running_mean.tobytes()) for k, s in small_model.bn.items()}
    clean, layers = deploy_network(small_model, d, Q, XB, NoiseConfig())
    assert set(layers) == {"conv1", "conv2"}
    # fc and BN untouched, conv replaced by the 8-bit read-back
    assert param_checksum({k: clean.weights[k] for k in ("fc.weight", "fc.bias")}) == \
        param_checksum({k: small_model.weights[k] for k in ("fc.weight", "fc.bias")})
    assert {k: (s.gamma.tobytes(), s.beta.tobytes(), s.running_mean.tobytes()) for k, s in clean.bn.items()} == base_bn
    qmodel = small_model.copy()
    for k in ("conv1", "conv2"):
        qmodel.weights[k] = quantize_layer(small_model.weights[k]).dequantize()
        np.testing.assert_allclose(clean.weights[k], qmodel.weights[k], atol=1e-6)
    qmodel.act_quant_bits = 8
    assert evaluate(clean, xte, yte) == evaluate(qmodel, xte, yte)

    noisy = NoiseConfig(read_noise=True, seed=1)
    a, _ = deploy_network(small_model, d, Q, XB, noisy)
    b, _ = deploy_network(small_model, d, Q, XB, noisy)
    c, _ = deploy_network(small_model, d, Q, XB, NoiseConfig(read_noise=True, seed=2))
    assert a.weights["conv2"].tobytes() == b.weights["conv2"].tobytes()
    assert not np.array_equal(a.weights["conv2"], c.weights["conv2"])
    # the source model is never modified
    assert param_checksum(small_model.weights) != param_checksum(a.weights)
