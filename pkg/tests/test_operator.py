import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vecnet.core import LayerParams, unit_columns
from vecnet.operator import (
    coherence_bound,
    dynamic_dictionary,
    max_recoverable_k,
    mutual_coherence,
    numerical_rank,
    random_dictionary,
    recovery_trial,
    superposition_check,
    synthesize,
)


def test_single_atom_operator():
    p = LayerParams(np.array([[0.0], [1.0]]), np.array([[1.0], [0.0]]))
    np.testing.assert_array_equal(synthesize(p, np.array([2.0])).materialize(), [[0, 2], [0, 0]])


def test_zero_code_gives_zero_operator_of_rank_zero():
    rng = np.random.default_rng(0)
    p = LayerParams(rng.standard_normal((4, 6)), rng.standard_normal((3, 6)))
    op = synthesize(p, np.zeros(6))
    assert not np.any(op.materialize()) and op.shape == (3, 4)
    assert numerical_rank(op) == 0


def test_synthesize_requires_interface():
    with pytest.raises(ValueError):
        synthesize(LayerParams(np.eye(2)), np.ones(2))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_materialized_matches_loop_sum_and_factored_apply(seed):
    rng = np.random.default_rng(seed)
    p = LayerParams(rng.standard_normal((5, 10)), rng.standard_normal((4, 10)))
    g = rng.uniform(-1e3, 1e3, 10) * (rng.random(10) < 0.6)
    W = np.zeros((4, 5))
    for i in range(10):
        W += g[i] * np.outer(p.U[:, i], p.S[:, i])
    op = synthesize(p, g)
    assert np.max(np.abs(op.materialize() - W)) <= 1e-12 * max(1.0, np.abs(W).max())
    x = rng.standard_normal(5)
    np.testing.assert_allclose(op.apply(x), W @ x, rtol=1e-12, atol=1e-9)


def test_one_active_atom_has_rank_one():
    rng = np.random.default_rng(1)
    p = LayerParams(rng.standard_normal((5, 8)), rng.standard_normal((6, 8)))
    g = np.zeros(8)
    g[3] = -1.7
    assert numerical_rank(synthesize(p, g)) == 1


def test_rank_rejects_non_positive_tolerance():
    with pytest.raises(ValueError):
        numerical_rank(np.eye(2), tol=0.0)


def test_coherence_orthonormal_and_duplicate():
    Q = np.linalg.qr(np.random.default_rng(2).standard_normal((6, 6)))[0]
    assert mutual_coherence(Q) <= 1e-15
    D = np.column_stack([Q[:, 0], Q[:, 0], Q[:, 1]])
    assert mutual_coherence(D) == pytest.approx(1.0, abs=1e-15)


def test_coherence_matches_pairwise_oracle():
    D = unit_columns(np.random.default_rng(3).standard_normal((16, 32)))
    oracle = max(abs(D[:, i] @ D[:, j]) / (np.linalg.norm(D[:, i]) * np.linalg.norm(D[:, j]))
                 for i in range(32) for j in range(32) if i != j)
    assert mutual_coherence(D) == pytest.approx(oracle, abs=1e-12)


def test_coherence_needs_two_columns():
    with pytest.raises(ValueError):
        mutual_coherence(np.ones((3, 1)))


def test_dynamic_dictionary_coherence_equals_interface_coherence():
    rng = np.random.default_rng(4)
    U, S = rng.standard_normal((12, 20)), rng.standard_normal((9, 20))
    x = rng.standard_normal(9)
    assert np.all(S.T @ x != 0)
    assert mutual_coherence(dynamic_dictionary(U, S, x)) == pytest.approx(mutual_coherence(U), abs=1e-10)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_superposition_is_exact(seed):
    rng = np.random.default_rng(seed)
    p = LayerParams(unit_columns(rng.standard_normal((8, 16))))
    g1, g2 = rng.standard_normal(16), rng.standard_normal(16)
    assert superposition_check(p, g1, g2) <= 1e-12
    assert superposition_check(p, g1, np.zeros(16)) == 0.0


def test_superposition_large_magnitude_codes():
    rng = np.random.default_rng(5)
    p = LayerParams(unit_columns(rng.standard_normal((8, 16))))
    g1, g2 = 1e6 * rng.choice([-1.0, 1.0], (100, 16)), 1e6 * rng.choice([-1.0, 1.0], (100, 16))
    assert superposition_check(p, g1, g2) <= 1e-6


def test_coherence_bound_arithmetic():
    assert coherence_bound(0.0) == math.inf
    assert coherence_bound(0.25) == pytest.approx(2.5)
    assert max_recoverable_k(0.25, 10) == 2
    assert max_recoverable_k(1 / 3, 10) == 1  # k < 2 strictly
    assert max_recoverable_k(0.0, 7) == 7


def test_recovery_orthonormal_any_k():
    for k in (1, 5, 16):
        res = recovery_trial(16, 16, k, seed=k, kind="orthonormal")
        assert res.success and res.mu <= 1e-14


def test_recovery_one_sparse_generic():
    wins = sum(recovery_trial(32, 48, 1, seed=s).success for s in range(200))
    assert wins == 200


def test_recovery_near_duplicate_failures_are_reported():
    results = [recovery_trial(32, 48, 4, seed=s, kind="near_duplicate") for s in range(20)]
    assert all(not r.bound_satisfied for r in results)
    assert all(r.mu > 0.9 for r in results)
    assert sum(not r.success for r in results) >= 1


def test_recovery_noisy_uses_single_lambda():
    res = recovery_trial(64, 80, 1, noise=0.01, seed=1)
    assert len(res.successes_per_lambda) == 1


def test_random_dictionary_kinds():
    rng = np.random.default_rng(6)
    assert np.allclose(np.linalg.norm(random_dictionary(10, 20, "gaussian", rng), axis=0), 1)
    with pytest.raises(ValueError):
        random_dictionary(4, 8, "orthonormal", rng)
