import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.linear_model import Lasso

from vecnet.core import LayerInput, LayerParams, layer_energy, lipschitz_constant, unit_columns
from vecnet.inference import (
    MaskError,
    MaskSpec,
    NetworkParams,
    SettleConfig,
    layer_step,
    make_mask,
    masked_objective,
    masked_settle,
    masked_settle_batch,
    network_energy,
    proximal_gradient,
    restrict_rows,
    settle,
    settle_batch,
    solve_layer,
)


def random_net(rng, d=16, m=8, K=24, K2=12, lam=0.05, k_top=None):
    l1 = LayerParams(unit_columns(rng.standard_normal((d, K))), unit_columns(rng.standard_normal((m, K))), lam=lam)
    l2 = LayerParams(unit_columns(rng.standard_normal((m, K2))), lam=1.5 * lam, k_top=k_top)
    return NetworkParams([l1, l2])


def test_layer_step_hand_example():
    p = LayerParams(np.eye(2), lam=0.5)
    np.testing.assert_allclose(layer_step(p, LayerInput(np.array([1.0, 0.0])), np.zeros(2), 1.0), [0.5, 0.0])


def test_layer_step_fixed_point_at_lasso_optimum():
    rng = np.random.default_rng(0)
    p = LayerParams(unit_columns(rng.standard_normal((10, 15))), lam=0.2)
    inp = LayerInput(rng.standard_normal(10))
    g = solve_layer(p, inp)
    eta = 1.0 / lipschitz_constant(p)
    assert np.max(np.abs(layer_step(p, inp, g, eta) - g)) <= 1e-12


def test_layer_step_lambda_zero_converges_to_linear_solve():
    rng = np.random.default_rng(1)
    S = np.eye(4) + 0.2 * rng.standard_normal((4, 4))
    x = rng.standard_normal(4)
    p = LayerParams(S, lam=0.0)
    g, _ = proximal_gradient(p, LayerInput(x), 20000)
    np.testing.assert_allclose(g, np.linalg.solve(S, x), atol=1e-8)


def test_layer_step_rejects_bad_eta():
    with pytest.raises(ValueError):
        layer_step(LayerParams(np.eye(2)), LayerInput(np.ones(2)), np.zeros(2), 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_solve_layer_matches_sklearn_lasso(seed):
    rng = np.random.default_rng(seed)
    d, K, lam = 20, 30, 0.15
    S = unit_columns(rng.standard_normal((d, K)))
    x = rng.standard_normal(d)
    g = solve_layer(LayerParams(S, lam=lam), LayerInput(x))
    # sklearn scales the quadratic by 1/n_samples
    ref = Lasso(alpha=lam / d, fit_intercept=False, tol=1e-14, max_iter=1_000_000).fit(S, x).coef_
    np.testing.assert_allclose(g, ref, atol=1e-7)


def test_settle_single_layer_lambda_zero_reconstructs():
    rng = np.random.default_rng(2)
    S = np.eye(5) + 0.1 * rng.standard_normal((5, 5))
    x = rng.standard_normal(5)
    res = settle(NetworkParams([LayerParams(S, lam=0.0)]), x, SettleConfig(max_sweeps=5000, tol=1e-15))
    assert np.linalg.norm(x - S @ res.codes[0]) <= 1e-8


def test_settle_zero_input_gives_zero_codes():
    net = random_net(np.random.default_rng(3))
    res = settle(net, np.zeros(16), SettleConfig())
    assert all(not np.any(g) for g in res.codes)
    assert res.energy == 0.0 and res.sweeps_used == 1 and res.converged


@pytest.mark.parametrize("seed", range(100))
def test_two_layer_accepted_energy_trace_non_increasing(seed):
    net = random_net(np.random.default_rng(seed))
    x = np.random.default_rng(seed + 1000).standard_normal(16)
    res = settle(net, x, SettleConfig(max_sweeps=60, tol=1e-10, accelerate=False))
    trace = res.energy_trace[1:]
    assert np.all(np.diff(trace) <= 1e-12 * np.maximum(1.0, np.abs(trace[:-1])))


def test_settle_trace_matches_final_energy():
    rng = np.random.default_rng(4)
    net = random_net(rng, k_top=3)
    x = rng.standard_normal(16)
    res = settle(net, x, SettleConfig(max_sweeps=40, accelerate=True))
    assert res.energy_trace[-1] == pytest.approx(float(network_energy(net, x[None], [g[None] for g in res.codes])[0]))
    assert np.count_nonzero(res.codes[1]) <= 3


def test_settle_batch_equals_single_sample_settles():
    rng = np.random.default_rng(5)
    net = random_net(rng)
    X = rng.standard_normal((6, 16))
    cfg = SettleConfig(max_sweeps=30, accelerate=True)
    batch = settle_batch(net, X, cfg)
    for i in range(6):
        single = settle(net, X[i], cfg)
        for l in range(2):
            # batched and single matmuls may round differently
            np.testing.assert_allclose(batch.codes[l][i], single.codes[l], rtol=0, atol=1e-12)


def test_settle_is_deterministic():
    rng = np.random.default_rng(6)
    net = random_net(rng)
    X = rng.standard_normal((4, 16))
    a = settle_batch(net, X, SettleConfig(accelerate=True))
    b = settle_batch(net, X, SettleConfig(accelerate=True))
    for ga, gb in zip(a.codes, b.codes):
        np.testing.assert_array_equal(ga, gb)


def test_accelerated_settle_reaches_ista_energy():
    rng = np.random.default_rng(7)
    p = LayerParams(unit_columns(rng.standard_normal((20, 40))), lam=0.1)
    net = NetworkParams([p])
    x = rng.standard_normal(20)
    fast = settle(net, x, SettleConfig(max_sweeps=300, tol=1e-12, accelerate=True))
    opt = float(layer_energy(p, LayerInput(x), solve_layer(p, LayerInput(x))))
    assert fast.energy == pytest.approx(opt, rel=1e-6)


def test_settle_rejects_wrong_input_size():
    with pytest.raises(ValueError):
        settle(random_net(np.random.default_rng(0)), np.zeros(5), SettleConfig())


def test_settle_config_validation():
    with pytest.raises(ValueError):
        SettleConfig(tol=0.0)
    with pytest.raises(ValueError):
        SettleConfig(max_sweeps=0)


def test_network_rejects_mismatched_coupling():
    a = LayerParams(np.eye(3), np.ones((4, 3)))
    b = LayerParams(np.ones((5, 2)))
    with pytest.raises(ValueError):
        NetworkParams([a, b])


def test_make_mask_examples():
    np.testing.assert_array_equal(make_mask("forecast_50", 8).mask, [1, 1, 1, 1, 0, 0, 0, 0])
    assert make_mask("random_30", 10, seed=3).mask.sum() == 7
    m = make_mask("forecast_25", 1024).mask
    assert m[:768].all() and not m[768:].any()
    b = make_mask("block_128", 512, seed=1).mask
    hidden = np.flatnonzero(b == 0)
    assert hidden.size == 128 and np.all(np.diff(hidden) == 1)


@pytest.mark.parametrize("regime, d", [("block_128", 128), ("forecast_25", 2), ("random_30", 1)])
def test_make_mask_too_short(regime, d):
    with pytest.raises(MaskError):
        make_mask(regime, d)


def test_mask_spec_rejects_all_hidden():
    with pytest.raises(MaskError):
        MaskSpec(np.zeros(4))


def test_masked_settle_all_ones_equals_plain_settle():
    rng = np.random.default_rng(8)
    net = random_net(rng)
    x = rng.standard_normal(16)
    cfg = SettleConfig(max_sweeps=30)
    res, x_hat = masked_settle(net, x, MaskSpec(np.ones(16)), cfg)
    plain = settle(net, x, cfg)
    for a, b in zip(res.codes, plain.codes):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(x_hat, net.layers[0].S @ plain.codes[0])


def test_masked_settle_matches_closed_form_one_sparse_solution():
    # orthonormal S whose first atom covers coordinates 0..3; coordinate 3 hidden
    Q = np.linalg.qr(np.random.default_rng(9).standard_normal((6, 6)))[0]
    atom = np.array([0.5, 0.5, 0.5, 0.5, 0, 0])
    S = np.linalg.qr(np.column_stack([atom, Q[:, 1:]]))[0]
    S[:, 0] = atom
    x = 2.0 * atom
    lam = 0.1
    mask = MaskSpec(np.array([1, 1, 1, 0, 1, 1.0]))
    # masked LASSO minimiser is 1-sparse on atom 0: a = (s0' M x - lam) / |M s0|^2
    a = (1.5 - lam) / 0.75
    net = NetworkParams([LayerParams(S, lam=lam)])
    _, x_hat = masked_settle(net, x * mask.mask, mask, SettleConfig(max_sweeps=5000, tol=1e-15), n_outer=50)
    assert abs(x_hat[3] - 0.5 * a) <= 1e-6


@pytest.mark.parametrize("seed", range(10))
def test_masked_objective_non_increasing_and_observed_exact(seed):
    rng = np.random.default_rng(seed)
    p = LayerParams(unit_columns(rng.standard_normal((32, 48))), lam=0.05)
    net = NetworkParams([p])
    mask = make_mask("random_30", 32, seed=seed)
    X = rng.standard_normal((3, 32)) * mask.mask
    out = masked_settle_batch(net, X, mask, SettleConfig(max_sweeps=400, tol=1e-12), n_outer=5)
    obj = np.array(out.objective)
    assert np.all(np.diff(obj, axis=0) <= 1e-12 * np.maximum(1, np.abs(obj[:-1])))
    for xk in out.imputed:
        np.testing.assert_array_equal(xk[:, mask.observed], X[:, mask.observed])
    np.testing.assert_allclose(obj[-1], masked_objective(p, X, mask.mask, out.result.codes[0]))


def test_restrict_rows_equals_masked_bottom_energy():
    rng = np.random.default_rng(10)
    p = LayerParams(unit_columns(rng.standard_normal((10, 14))), lam=0.1)
    rows = np.arange(6)
    sub = restrict_rows(NetworkParams([p]), rows)
    x = rng.standard_normal(10)
    g = solve_layer(sub.layers[0], LayerInput(x[rows]))
    mask = np.r_[np.ones(6), np.zeros(4)]
    assert float(layer_energy(sub.layers[0], LayerInput(x[rows]), g)) == pytest.approx(
        float(masked_objective(p, x, mask, g)), rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([None, 1, 3]))
def test_hard_k_accepted_sweeps_never_raise_energy(seed, k):
    rng = np.random.default_rng(seed)
    p = LayerParams(unit_columns(rng.standard_normal((12, 20))), lam=0.05, k_top=k)
    res = settle(NetworkParams([p]), rng.standard_normal(12), SettleConfig(max_sweeps=50, tol=1e-12))
    assert np.all(np.diff(res.energy_trace[1:]) <= 1e-12)
