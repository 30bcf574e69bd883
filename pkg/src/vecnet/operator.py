"""Per-sample synthesized operators and the diagnostics built on them."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import DimensionError, LayerInput, LayerParams, unit_columns
from .inference import solve_layer

RANK_TOL = 1e-8


@dataclass(frozen=True)
class SynthOperator:
    """W = U diag(g) Sᵀ kept in factored form."""

    U: np.ndarray
    S: np.ndarray
    g: np.ndarray

    @property
    def shape(self):
        return (self.U.shape[0], self.S.shape[0])

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.g)

    def materialize(self) -> np.ndarray:
        A = self.support
        return (self.U[:, A] * self.g[A]) @ self.S[:, A].T

    def apply(self, x: np.ndarray) -> np.ndarray:
        """W x without forming W."""
        return self.U @ (self.g * (self.S.T @ x))


def synthesize(p: LayerParams, g: np.ndarray) -> SynthOperator:
    if p.U is None:
        raise ValueError(f"layer {p.index} has no interface dictionary")
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (p.K,):
        raise DimensionError(p.index, "K", p.K, g.shape[-1] if g.ndim else 0)
    return SynthOperator(p.U, p.S, g.copy())


def numerical_rank(op, tol: float = RANK_TOL) -> int:
    """Singular values below ``tol``·σ_max count as zero."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    W = op.materialize() if isinstance(op, SynthOperator) else np.asarray(op)
    if not np.any(W):
        return 0
    sv = np.linalg.svd(W, compute_uv=False)
    return int(np.sum(sv > tol * sv[0]))


def mutual_coherence(D: np.ndarray) -> float:
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2 or D.shape[1] < 2:
        raise ValueError("mutual coherence needs at least two columns")
    Dn = unit_columns(D)
    G = np.abs(Dn.T @ Dn)
    np.fill_diagonal(G, 0.0)
    return float(min(G.max(), 1.0))


def dynamic_dictionary(U: np.ndarray, S: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Columns Φ_i(x) = (s_iᵀx)·u_i."""
    return U * (S.T @ x)


def superposition_check(p: LayerParams, g1: np.ndarray, g2: np.ndarray) -> float:
    g1 = np.asarray(g1, dtype=np.float64)
    g2 = np.asarray(g2, dtype=np.float64)
    if g1.shape[-1] != p.K or g2.shape[-1] != p.K:
        raise DimensionError(p.index, "K", p.K, g1.shape[-1] if g1.shape[-1] != p.K else g2.shape[-1])
    lhs = (g1 + g2) @ p.S.T
    rhs = g1 @ p.S.T + g2 @ p.S.T
    return float(np.max(np.abs(lhs - rhs)))


def coherence_bound(mu: float) -> float:
    """Largest support size k with k < ½(1 + 1/μ) is the floor of this minus one."""
    return math.inf if mu == 0 else 0.5 * (1.0 + 1.0 / mu)


def max_recoverable_k(mu: float, K: int) -> int:
    b = coherence_bound(mu)
    if math.isinf(b):
        return K
    return max(0, math.ceil(b) - 1)


class DictionaryKind(str, enum.Enum):
    GAUSSIAN = "gaussian"
    ORTHONORMAL = "orthonormal"
    NEAR_DUPLICATE = "near_duplicate"


# multipliers of ‖Φᵀy‖∞ tried in the noiseless case, smallest first
LAMBDA_SWEEP = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2)


@dataclass
class RecoveryResult:
    success: bool
    mu: float
    bound_satisfied: bool
    best_lambda: Optional[float]
    support_true: np.ndarray
    support_found: np.ndarray
    successes_per_lambda: tuple


def random_dictionary(d: int, K: int, kind, rng: np.random.Generator) -> np.ndarray:
    kind = DictionaryKind(kind)
    if kind is DictionaryKind.ORTHONORMAL:
        if K > d:
            raise ValueError("an orthonormal dictionary needs K <= d")
        Q, _ = np.linalg.qr(rng.standard_normal((d, K)))
        return Q
    D = unit_columns(rng.standard_normal((d, K)))
    if kind is DictionaryKind.NEAR_DUPLICATE:
        D[:, 1] = unit_columns((D[:, 0] + 0.05 * rng.standard_normal(d))[:, None])[:, 0]
    return D


def recovery_trial(
    d: int,
    K: int,
    k: int,
    noise: float = 0.0,
    seed: int = 0,
    kind="gaussian",
    lambdas: Sequence[float] = LAMBDA_SWEEP,
) -> RecoveryResult:
    """Exact support recovery of a k-sparse code by a single-layer settle.

    Coefficients have magnitude in [0.5, 1.5] with random signs. Noiseless
    trials sweep λ = c·‖Φᵀy‖∞ over ``lambdas``; noisy trials use the single
    universal-threshold value λ = 2σ·max‖Φ_i‖·√(2 ln K). Success means the
    recovered support equals the true one for at least one λ. With the
    near-duplicate dictionary the two twin atoms are both placed in the
    true support.
    """
    if k < 1 or k > K:
        raise ValueError("k must lie in [1, K]")
    rng = np.random.default_rng(np.random.SeedSequence([seed, d, K, k]))
    kind = DictionaryKind(kind)
    Phi = random_dictionary(d, K, kind, rng)
    mu = mutual_coherence(Phi)
    if kind is DictionaryKind.NEAR_DUPLICATE and k >= 2:
        rest = rng.choice(np.arange(2, K), size=k - 2, replace=False)
        support = np.sort(np.concatenate([[0, 1], rest])).astype(int)
    else:
        support = np.sort(rng.choice(K, size=k, replace=False))
    g_true = np.zeros(K)
    g_true[support] = rng.uniform(0.5, 1.5, size=k) * rng.choice([-1.0, 1.0], size=k)
    y = Phi @ g_true
    if noise > 0:
        y = y + noise * rng.standard_normal(d)
        lam_values = [2.0 * noise * np.linalg.norm(Phi, axis=0).max() * math.sqrt(2 * math.log(K))]
    else:
        scale = np.max(np.abs(Phi.T @ y))
        lam_values = [c * scale for c in lambdas]

    hits = []
    best, found = None, np.array([], dtype=int)
    for lam in lam_values:
        p = LayerParams(Phi, lam=lam)
        g = solve_layer(p, LayerInput(y), tol=1e-13, max_iter=500_000)
        # entries below the round-off floor of the synthesis are not support
        est = np.flatnonzero(np.abs(g) > 1e-9 * max(1.0, np.abs(g).max()))
        ok = np.array_equal(est, support)
        hits.append(bool(ok))
        if ok and best is None:
            best, found = lam, est
        elif best is None:
            found = est
    return RecoveryResult(
        success=any(hits),
        mu=mu,
        bound_satisfied=k < coherence_bound(mu),
        best_lambda=best,
        support_true=support,
        support_found=found,
        successes_per_lambda=tuple(hits),
    )
