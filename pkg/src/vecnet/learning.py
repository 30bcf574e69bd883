"""Slow learning: Atomic-Hebb residual x code updates on the settled codes."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import DimensionError, LayerInput, LayerParams, layer_energy
from .inference import (
    NetworkParams,
    SettleConfig,
    SettleError,
    settle_batch,
    solve_layer,
)

log = logging.getLogger(__name__)

# a column closer than this to unit norm is left bit-for-bit untouched
_UNIT_SLACK = 1e-13


@dataclass
class TrainerConfig:
    rho_s: float = 1e-3
    rho_u: float = 1e-3
    use_adaptive_moments: bool = True
    moment_decays: Tuple[float, float] = (0.9, 0.999)
    epsilon: float = 1e-8
    batch_size: int = 32
    dc_removal: bool = False
    # (minimum usage fraction, window in epochs); None disables re-initialisation
    dead_atom_threshold: Optional[Tuple[float, int]] = None

    def __post_init__(self):
        if not self.rho_s > 0:
            raise ValueError("rho_s must be positive")
        if not self.rho_u > 0:
            raise ValueError("rho_u must be positive")
        b1, b2 = self.moment_decays
        if not (0 < b1 < 1 and 0 < b2 < 1):
            raise ValueError("moment_decays must lie in (0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        self.moment_decays = tuple(self.moment_decays)
        if self.dead_atom_threshold is not None:
            self.dead_atom_threshold = tuple(self.dead_atom_threshold)


@dataclass
class OptimizerState:
    """Adam accumulators for one layer, keyed by dictionary name."""

    first: Dict[str, np.ndarray] = field(default_factory=dict)
    second: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    usage: Optional[np.ndarray] = None
    usage_samples: int = 0
    usage_epochs: int = 0

    @classmethod
    def for_layer(cls, p: LayerParams) -> "OptimizerState":
        st = cls()
        for name, A in _dictionaries(p).items():
            st.first[name] = np.zeros_like(A)
            st.second[name] = np.zeros_like(A)
        st.usage = np.zeros(p.K)
        return st


def _dictionaries(p: LayerParams) -> Dict[str, np.ndarray]:
    out = {"S": p.S}
    if p.U is not None:
        out["U"] = p.U
    if p.U_down is not None:
        out["U_down"] = p.U_down
    return out


@dataclass
class Gradients:
    """Descent directions (−∂E/∂·) for the dictionaries of one layer."""

    S: np.ndarray
    U: Optional[np.ndarray] = None
    U_down: Optional[np.ndarray] = None

    def items(self):
        for name in ("S", "U", "U_down"):
            g = getattr(self, name)
            if g is not None:
                yield name, g


def residuals(p: LayerParams, inp: LayerInput, g_star: np.ndarray):
    """r_x = x − Sg*, r_h = h_target − U g* (``None`` without a target)."""
    if np.shape(g_star)[-1] != p.K:
        raise DimensionError(p.index, "K", p.K, np.shape(g_star)[-1])
    if np.shape(inp.x)[-1] != p.d:
        raise DimensionError(p.index, "d", p.d, np.shape(inp.x)[-1])
    r_x = inp.x - g_star @ p.S.T
    r_h = None
    if inp.h_target is not None:
        r_h = inp.h_target - g_star @ p.U_td.T
    return r_x, r_h


def atomic_hebb_gradients(
    p: LayerParams,
    X: np.ndarray,
    G: np.ndarray,
    H: Optional[np.ndarray] = None,
) -> Gradients:
    """Batch-mean residual x code outer products.

    ``X`` (B, d) are layer inputs, ``G`` (B, K) the settled codes and ``H``
    (B, m) optional top-down targets. Columns whose code is zero across the
    whole batch come out exactly zero.
    """
    X = np.atleast_2d(X)
    G = np.atleast_2d(G)
    if X.shape[0] != G.shape[0]:
        raise ValueError("inputs and codes disagree on batch size")
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    B = G.shape[0]
    r_x, r_h = residuals(p, LayerInput(X, None if H is None else np.atleast_2d(H)), G)
    out = Gradients(S=r_x.T @ G / B)
    if r_h is not None:
        if p.tied:
            out.U = r_h.T @ G / B
        else:
            out.U_down = r_h.T @ G / B
            r_fwd = np.atleast_2d(H) - G @ p.U.T
            out.U = r_fwd.T @ G / B
    return out


def atomic_hebb_from_pairs(p: LayerParams, batch: Sequence[Tuple[LayerInput, np.ndarray]]):
    """Same as :func:`atomic_hebb_gradients` for a list of (input, code) pairs."""
    if not batch:
        raise ValueError("empty batch")
    has_h = [inp.h_target is not None for inp, _ in batch]
    if any(has_h) and not all(has_h):
        raise ValueError("batch mixes samples with and without top-down targets")
    dims = {(np.shape(inp.x)[-1], np.shape(g)[-1]) for inp, g in batch}
    if len(dims) != 1:
        raise ValueError(f"mixed dimensions in batch: {sorted(dims)}")
    X = np.stack([inp.x for inp, _ in batch])
    G = np.stack([g for _, g in batch])
    H = np.stack([inp.h_target for inp, _ in batch]) if all(has_h) else None
    return atomic_hebb_gradients(p, X, G, H)


def renormalize_columns(A: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Project columns to unit norm; zero columns get a fresh Gaussian draw."""
    A = A.copy()
    norms = np.linalg.norm(A, axis=0)
    dead = norms < 1e-12
    if np.any(dead):
        fresh = rng.standard_normal((A.shape[0], int(dead.sum())))
        A[:, dead] = fresh / np.linalg.norm(fresh, axis=0)
        norms[dead] = 1.0
    off = np.abs(norms - 1.0) > _UNIT_SLACK
    A[:, off] = A[:, off] / norms[off]
    return A


def apply_update(
    p: LayerParams,
    grads: Gradients,
    cfg: TrainerConfig,
    st: OptimizerState,
    rng: Optional[np.random.Generator] = None,
) -> None:
    """Optimizer step on every dictionary, optional DC removal, renormalisation.

    Nothing is written back unless every updated array is finite.
    """
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence([st.step, p.index]))
    current = _dictionaries(p)
    step = st.step + 1
    new, moments = {}, {}
    for name, G in grads.items():
        A = current[name]
        if G.shape != A.shape:
            raise ValueError(f"gradient for {name} has shape {G.shape}, expected {A.shape}")
        rho = cfg.rho_s if name == "S" else cfg.rho_u
        if cfg.use_adaptive_moments:
            b1, b2 = cfg.moment_decays
            grad = -G  # descent direction -> energy gradient
            m = b1 * st.first[name] + (1 - b1) * grad
            v = b2 * st.second[name] + (1 - b2) * grad * grad
            m_hat = m / (1 - b1**step)
            v_hat = v / (1 - b2**step)
            with np.errstate(invalid="ignore", over="ignore"):  # caught by the finite check
                A_new = A - rho * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
            moments[name] = (m, v)
        else:
            A_new = A + rho * G
        if name == "S" and cfg.dc_removal:
            A_new = A_new - A_new.mean(axis=0, keepdims=True)
        new[name] = A_new
    for name, A_new in new.items():
        if not np.all(np.isfinite(A_new)):
            raise FloatingPointError(f"layer {p.index}: non-finite update to {name}")
    for name, A_new in new.items():
        setattr(p, name, renormalize_columns(A_new, rng))
    for name, (m, v) in moments.items():
        st.first[name], st.second[name] = m, v
    st.step = step


@dataclass
class DanskinReport:
    max_rel_error: float
    entries: List[Tuple[int, int]]
    analytic: np.ndarray
    finite_difference: np.ndarray


def danskin_check(
    p: LayerParams,
    inp: LayerInput,
    perturb_scale: float = 1e-5,
    n_entries: Optional[int] = 16,
    rng: Optional[np.random.Generator] = None,
    solve_tol: float = 1e-12,
    floor: float = 1e-6,
) -> DanskinReport:
    """Compare central differences of the settled energy against −r g*ᵀ.

    L(S) = min_g E(g, S) is re-solved after each ±``perturb_scale`` change of
    one entry of S (no renormalisation, the derivative is taken in raw S).
    Half of the sampled entries come from active columns when possible.
    Relative error per entry is |fd − an| / max(|fd|, |an|, floor).
    """
    if perturb_scale <= 0:
        raise ValueError("perturb_scale must be positive")
    g_star = solve_layer(p, inp, tol=solve_tol)
    r_x, _ = residuals(p, inp, g_star)
    analytic = -np.outer(r_x, g_star)

    d, K = p.S.shape
    if n_entries is None or n_entries >= d * K:
        entries = [(j, i) for j in range(d) for i in range(K)]
    else:
        if rng is None:
            rng = np.random.default_rng(0)
        active = np.flatnonzero(g_star)
        n_act = min(n_entries // 2, active.size * d)
        picks = set()
        while len(picks) < n_act:
            picks.add((int(rng.integers(d)), int(active[rng.integers(active.size)])))
        while len(picks) < n_entries:
            picks.add((int(rng.integers(d)), int(rng.integers(K))))
        entries = sorted(picks)

    def loss(S):
        q = p.copy()
        q.S = S
        g = solve_layer(q, inp, tol=solve_tol, g0=g_star)
        return float(layer_energy(q, inp, g))

    fd = np.empty(len(entries))
    an = np.empty(len(entries))
    for n, (j, i) in enumerate(entries):
        S_plus = p.S.copy()
        S_plus[j, i] += perturb_scale
        S_minus = p.S.copy()
        S_minus[j, i] -= perturb_scale
        fd[n] = (loss(S_plus) - loss(S_minus)) / (2 * perturb_scale)
        an[n] = analytic[j, i]
    rel = np.abs(fd - an) / np.maximum(np.maximum(np.abs(fd), np.abs(an)), floor)
    return DanskinReport(float(rel.max()), entries, an, fd)


def layer_batches(net: NetworkParams, res) -> List[Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]]:
    """(inputs, codes, targets) per layer from a batch settle."""
    return [(res.inputs[l], res.codes[l], res.h_targets[l]) for l in range(net.L)]


@dataclass
class EpochMetrics:
    mse: float
    energy: float
    l0: List[float]
    skipped_batches: int = 0

    def as_dict(self):
        return {"mse": self.mse, "energy": self.energy, "l0": list(self.l0),
                "skipped_batches": self.skipped_batches}


def _reinit_dead_atoms(net, states, tcfg, rng):
    frac, window = tcfg.dead_atom_threshold
    for p, st in zip(net.layers, states):
        st.usage_epochs += 1
        if st.usage_epochs < window:
            continue
        rate = st.usage / max(st.usage_samples, 1)
        dead = np.flatnonzero(rate < frac)
        for name in _dictionaries(p):
            A = getattr(p, name).copy()
            fresh = rng.standard_normal((A.shape[0], dead.size))
            A[:, dead] = fresh / np.linalg.norm(fresh, axis=0)
            setattr(p, name, A)
            st.first[name][:, dead] = 0.0
            st.second[name][:, dead] = 0.0
        if dead.size:
            log.info("layer %d: re-initialised %d dead atoms", p.index, dead.size)
        st.usage[:] = 0.0
        st.usage_samples = 0
        st.usage_epochs = 0


def train_epoch(
    net: NetworkParams,
    data: np.ndarray,
    scfg: SettleConfig,
    tcfg: TrainerConfig,
    states: List[OptimizerState],
    rng: np.random.Generator,
) -> EpochMetrics:
    """One pass over ``data`` (N, d) in shuffled minibatches.

    Each minibatch is settled with frozen dictionaries, then every layer gets
    one Atomic-Hebb update. Metrics describe the settles before the update.
    """
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if data.shape[0] == 0:
        raise ValueError("no training data")
    order = rng.permutation(data.shape[0])
    mse_sum = energy_sum = 0.0
    l0_sum = np.zeros(net.L)
    seen = skipped = 0
    for start in range(0, len(order), tcfg.batch_size):
        X = data[order[start:start + tcfg.batch_size]]
        try:
            res = settle_batch(net, X, scfg)
        except SettleError as exc:
            log.warning("skipping batch at offset %d: %s", start, exc)
            skipped += 1
            continue
        recon = res.codes[0] @ net.layers[0].S.T
        mse_sum += float(np.sum(np.mean((X - recon) ** 2, axis=1)))
        energy_sum += float(np.sum(res.final_energy))
        l0_sum += [np.sum(np.count_nonzero(c, axis=1)) for c in res.codes]
        seen += X.shape[0]
        grads = [atomic_hebb_gradients(p, x, g, h)
                 for p, (x, g, h) in zip(net.layers, layer_batches(net, res))]
        for p, gr, st, codes in zip(net.layers, grads, states, res.codes):
            apply_update(p, gr, tcfg, st, rng)
            if st.usage is not None:
                st.usage += np.count_nonzero(codes, axis=0)
                st.usage_samples += codes.shape[0]
    if tcfg.dead_atom_threshold is not None:
        _reinit_dead_atoms(net, states, tcfg, rng)
    n = max(seen, 1)
    return EpochMetrics(mse_sum / n, energy_sum / n, list(l0_sum / n), skipped)


def init_states(net: NetworkParams) -> List[OptimizerState]:
    return [OptimizerState.for_layer(p) for p in net.layers]
