"""Fast settle: proximal steps organised into upward/downward sweeps."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np

from .core import (
    DimensionError,
    LayerInput,
    LayerParams,
    layer_energy,
    lipschitz_constant,
    smooth_gradient,
    soft_threshold,
    topk_project,
)

ENERGY_FLOOR = 1e-12
# round-off allowance when deciding whether a sweep raised the energy
_INCREASE_SLACK = 1e-13


class SettleError(RuntimeError):
    def __init__(self, message: str, layer: Optional[int] = None, sweep: Optional[int] = None):
        self.layer = layer
        self.sweep = sweep
        super().__init__(message)


class MaskError(ValueError):
    pass


@dataclass
class NetworkParams:
    layers: List[LayerParams]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a network needs at least one layer")
        for i, p in enumerate(self.layers):
            p.index = i
        for lo, hi in zip(self.layers[:-1], self.layers[1:]):
            if lo.U is None:
                raise DimensionError(lo.index, "m", hi.d, 0)
            if lo.m != hi.d:
                raise DimensionError(hi.index, "d", lo.m, hi.d)

    @property
    def L(self) -> int:
        return len(self.layers)

    @property
    def d_in(self) -> int:
        return self.layers[0].d

    def copy(self) -> "NetworkParams":
        return NetworkParams([p.copy() for p in self.layers])


@dataclass
class SettleConfig:
    max_sweeps: int = 50
    tol: float = 1e-6
    accelerate: bool = False
    reject_increasing: bool = True
    warm_start: Optional[List[np.ndarray]] = None

    def __post_init__(self):
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be positive")
        if not self.tol > 0:
            raise ValueError("tol must be positive")


@dataclass
class SettleResult:
    """Settled codes for one sample.

    ``energy_trace[0]`` is the energy of the starting codes; entry ``s`` is the
    total after accepted sweep ``s`` (a rejected sweep repeats the previous
    value).
    """

    codes: List[np.ndarray]
    h_targets: List[Optional[np.ndarray]]
    energy_trace: np.ndarray
    sweeps_used: int
    converged: bool
    rejected_sweeps: int = 0

    @property
    def energy(self) -> float:
        return float(self.energy_trace[-1])


@dataclass
class BatchSettleResult:
    codes: List[np.ndarray]
    h_targets: List[Optional[np.ndarray]]
    inputs: List[np.ndarray]
    energy_trace: np.ndarray  # (sweeps + 1, B)
    sweeps_used: np.ndarray
    converged: np.ndarray
    rejected_sweeps: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.codes[0].shape[0]

    @property
    def final_energy(self) -> np.ndarray:
        return self.energy_trace[-1]

    def sample(self, i: int) -> SettleResult:
        n = int(self.sweeps_used[i])
        return SettleResult(
            codes=[c[i].copy() for c in self.codes],
            h_targets=[None if h is None else h[i].copy() for h in self.h_targets],
            energy_trace=self.energy_trace[: n + 1, i].copy(),
            sweeps_used=n,
            converged=bool(self.converged[i]),
            rejected_sweeps=int(self.rejected_sweeps[i]),
        )


@dataclass(frozen=True)
class StepSizes:
    topdown: tuple
    bottom_up: tuple


def resolve_step_sizes(net: NetworkParams) -> StepSizes:
    """Per-layer steps: one with the top-down term active, one without.

    Auto steps are 1/L; the bottom-up step uses the Lipschitz constant of SᵀS
    alone. The top layer never carries a target, so an explicit ``eta`` there
    is its only step.
    """
    td, bu = [], []
    for l, p in enumerate(net.layers):
        top = l == net.L - 1
        if p.eta_bottom_only is not None:
            b = p.eta_bottom_only
        elif top and p.eta is not None:
            b = p.eta
        else:
            b = 1.0 / lipschitz_constant(p, include_topdown=False)
        if p.eta is not None:
            t = p.eta
        elif top or p.U_td is None or p.beta_td == 0:
            t = b
        else:
            t = 1.0 / lipschitz_constant(p, include_topdown=True)
        td.append(t)
        bu.append(b)
    return StepSizes(tuple(td), tuple(bu))


def layer_step(p: LayerParams, inp: LayerInput, g: np.ndarray, eta: float) -> np.ndarray:
    """One proximal step: soft-threshold the gradient step, then cap support."""
    if not eta > 0:
        raise ValueError("eta must be positive")
    z = g - eta * smooth_gradient(p, inp, g)
    out = soft_threshold(z, eta * p.lam)
    if p.k_top is not None:
        out = topk_project(out, p.k_top)
    return out


def propagate(net: NetworkParams, X: np.ndarray, codes: Sequence[np.ndarray]):
    """Layer inputs x_l and top-down targets h_l implied by a set of codes."""
    xs = [X]
    for l in range(net.L - 1):
        p = net.layers[l]
        xs.append(p.activation(codes[l] @ p.U.T))
    hs: List[Optional[np.ndarray]] = []
    for l in range(net.L - 1):
        hs.append(codes[l + 1] @ net.layers[l + 1].S.T)
    hs.append(None)
    return xs, hs


def network_energy(
    net: NetworkParams, X: np.ndarray, codes: Sequence[np.ndarray], per_layer: bool = False
):
    """Sum of layer energies with inputs and targets derived from ``codes``."""
    xs, hs = propagate(net, X, codes)
    parts = [
        layer_energy(p, LayerInput(xs[l], hs[l]), codes[l])
        for l, p in enumerate(net.layers)
    ]
    if per_layer:
        return parts
    return np.sum(parts, axis=0)


class _Momentum:
    """FISTA extrapolation state for one layer over a batch.

    Rows flagged ``plain`` take unextrapolated steps until the flag is cleared.
    """

    def __init__(self, g: np.ndarray):
        self.prev = g.copy()
        self.t = np.ones(g.shape[0])
        self.plain = np.zeros(g.shape[0], dtype=bool)

    def extrapolate(self, g: np.ndarray) -> np.ndarray:
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * self.t**2))
        t_new[self.plain] = 1.0
        beta = ((self.t - 1.0) / t_new)[:, None]
        y = g + beta * (g - self.prev)
        self.prev = g.copy()
        self.t = t_new
        return y

    def restart(self, g: np.ndarray, rows: np.ndarray) -> None:
        self.prev[rows] = g[rows]
        self.t[rows] = 1.0
        self.plain[rows] = True

    def take(self, rows: np.ndarray) -> "_Momentum":
        m = _Momentum.__new__(_Momentum)
        m.prev = self.prev[rows].copy()
        m.t = self.t[rows].copy()
        m.plain = self.plain[rows].copy()
        return m

    def put(self, rows: np.ndarray, other: "_Momentum") -> None:
        self.prev[rows] = other.prev
        self.t[rows] = other.t
        self.plain[rows] = other.plain


def _sweep(net, X, codes, have_targets, steps, moms):
    L = net.L
    codes = [c.copy() for c in codes]
    xs = [None] * L

    def step(l, inp, eta):
        g = codes[l]
        if moms is not None:
            g = moms[l].extrapolate(g)
        codes[l] = layer_step(net.layers[l], inp, g, eta)

    x = X
    for l, p in enumerate(net.layers):
        h = None
        if have_targets and l < L - 1:
            h = codes[l + 1] @ net.layers[l + 1].S.T
        step(l, LayerInput(x, h), steps.topdown[l] if h is not None else steps.bottom_up[l])
        xs[l] = x
        if l < L - 1:
            x = p.activation(codes[l] @ p.U.T)
    for l in range(L - 2, -1, -1):
        h = codes[l + 1] @ net.layers[l + 1].S.T
        step(l, LayerInput(xs[l], h), steps.topdown[l])
    return codes


def _broadcast_warm(net: NetworkParams, warm, B: int) -> List[np.ndarray]:
    out = []
    for p, w in zip(net.layers, warm):
        w = np.asarray(w, dtype=np.float64)
        if w.shape[-1] != p.K:
            raise DimensionError(p.index, "K (warm start)", p.K, w.shape[-1])
        out.append(np.broadcast_to(w, (B, p.K)).copy())
    return out


def settle_batch(net: NetworkParams, X: np.ndarray, cfg: SettleConfig) -> BatchSettleResult:
    """Settle every row of ``X`` independently; rows stop individually."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != net.d_in:
        raise DimensionError(0, "d", net.d_in, X.shape[1])
    B = X.shape[0]
    steps = resolve_step_sizes(net)
    if cfg.warm_start is not None:
        if len(cfg.warm_start) != net.L:
            raise ValueError("warm_start needs one code per layer")
        codes = _broadcast_warm(net, cfg.warm_start, B)
        have_targets = True
    else:
        codes = [np.zeros((B, p.K)) for p in net.layers]
        have_targets = False

    E_prev = network_energy(net, X, codes)
    trace = [E_prev.copy()]
    active = np.ones(B, dtype=bool)
    converged = np.zeros(B, dtype=bool)
    sweeps_used = np.zeros(B, dtype=int)
    rejected = np.zeros(B, dtype=int)
    moms = [_Momentum(c) for c in codes] if cfg.accelerate else None

    for sweep in range(1, cfg.max_sweeps + 1):
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        sub_moms = [m.take(rows) for m in moms] if moms is not None else None
        new = _sweep(net, X[rows], [c[rows] for c in codes], have_targets, steps, sub_moms)
        E_new = network_energy(net, X[rows], new)
        if not np.all(np.isfinite(E_new)):
            parts = network_energy(net, X[rows], new, per_layer=True)
            bad = next(l for l, e in enumerate(parts) if not np.all(np.isfinite(e)))
            raise SettleError(
                f"non-finite energy at layer {bad} in sweep {sweep}", layer=bad, sweep=sweep
            )
        E_old = E_prev[rows]
        increased = E_new > E_old + _INCREASE_SLACK * np.maximum(np.abs(E_old), ENERGY_FLOOR)
        sweeps_used[rows] = sweep
        reject = increased if cfg.reject_increasing else np.zeros_like(increased)
        accept = ~reject

        acc_rows = rows[accept]
        for l in range(net.L):
            codes[l][acc_rows] = new[l][accept]
        if moms is not None:
            for m, sm in zip(moms, sub_moms):
                m.put(rows, sm)
        E_prev[acc_rows] = E_new[accept]

        rej_rows = rows[reject]
        if rej_rows.size:
            rejected[rej_rows] += 1
            if moms is not None:
                # retry once without momentum; a rejected plain sweep is a stall
                was_plain = moms[0].plain[rej_rows]
                for l, m in enumerate(moms):
                    m.restart(codes[l], rej_rows[~was_plain])
                active[rej_rows[was_plain]] = False
            else:
                active[rej_rows] = False
        if moms is not None:
            for m in moms:
                m.plain[acc_rows] = False

        improvement = (E_old[accept] - E_new[accept]) / np.maximum(E_old[accept], ENERGY_FLOOR)
        done = (improvement < cfg.tol) & ((improvement >= 0) | cfg.reject_increasing)
        converged[acc_rows[done]] = True
        active[acc_rows[done]] = False
        trace.append(E_prev.copy())
        have_targets = have_targets or net.L > 1

    xs, hs = propagate(net, X, codes)
    return BatchSettleResult(
        codes=codes,
        h_targets=hs,
        inputs=xs,
        energy_trace=np.array(trace),
        sweeps_used=sweeps_used,
        converged=converged,
        rejected_sweeps=rejected,
    )


def settle(net: NetworkParams, x: np.ndarray, cfg: SettleConfig) -> SettleResult:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("settle takes a single sample; use settle_batch for batches")
    return settle_batch(net, x[None, :], cfg).sample(0)


def proximal_gradient(
    p: LayerParams,
    inp: LayerInput,
    n_iter: int,
    accelerate: bool = False,
    eta: Optional[float] = None,
    g0: Optional[np.ndarray] = None,
):
    """Plain ISTA/FISTA on one layer with a fixed step (no restarts).

    Returns the final code and the objective after every iteration.
    """
    if eta is None:
        eta = 1.0 / lipschitz_constant(p, include_topdown=inp.h_target is not None)
    g = np.zeros(p.K) if g0 is None else np.asarray(g0, dtype=np.float64).copy()
    y, g_prev, t = g.copy(), g.copy(), 1.0
    objective = np.empty(n_iter)
    for k in range(n_iter):
        if accelerate:
            g = layer_step(p, inp, y, eta)
            t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
            y = g + ((t - 1.0) / t_new) * (g - g_prev)
            g_prev, t = g, t_new
        else:
            g = layer_step(p, inp, g, eta)
        objective[k] = layer_energy(p, inp, g)
    return g, objective


# -- masks and masked imputation ---------------------------------------------


class MaskRegime(str, enum.Enum):
    FORECAST_25 = "forecast_25"
    FORECAST_50 = "forecast_50"
    RANDOM_30 = "random_30"
    BLOCK_128 = "block_128"
    CUSTOM = "custom"


@dataclass
class MaskSpec:
    mask: np.ndarray
    regime: MaskRegime = MaskRegime.CUSTOM

    def __post_init__(self):
        self.mask = np.asarray(self.mask).astype(np.float64)
        if self.mask.ndim != 1 or not np.all((self.mask == 0) | (self.mask == 1)):
            raise MaskError("mask must be a binary vector")
        if self.mask.sum() == 0:
            raise MaskError("mask observes no positions")
        self.regime = MaskRegime(self.regime)

    @property
    def observed(self) -> np.ndarray:
        return self.mask.astype(bool)

    @property
    def hidden(self) -> np.ndarray:
        return ~self.observed


def make_mask(regime, d: int, seed: int = 0) -> MaskSpec:
    regime = MaskRegime(regime)
    m = np.ones(d)
    if regime in (MaskRegime.FORECAST_25, MaskRegime.FORECAST_50):
        frac = 0.25 if regime is MaskRegime.FORECAST_25 else 0.5
        n_hidden = int(round(frac * d))
        if n_hidden < 1 or n_hidden >= d:
            raise MaskError(f"{regime.value} needs a longer signal than d={d}")
        m[d - n_hidden:] = 0.0
    elif regime is MaskRegime.RANDOM_30:
        n_hidden = int(round(0.3 * d))
        if n_hidden < 1 or n_hidden >= d:
            raise MaskError(f"random_30 needs a longer signal than d={d}")
        rng = np.random.default_rng(seed)
        m[rng.choice(d, size=n_hidden, replace=False)] = 0.0
    elif regime is MaskRegime.BLOCK_128:
        if d <= 128:
            raise MaskError(f"block_128 needs d > 128, got {d}")
        start = int(np.random.default_rng(seed).integers(0, d - 128 + 1))
        m[start:start + 128] = 0.0
    else:
        raise MaskError("custom masks are built directly with MaskSpec")
    return MaskSpec(m, regime)


def masked_objective(p: LayerParams, x_obs: np.ndarray, mask: np.ndarray, g: np.ndarray):
    """½‖m ⊙ (x_obs − Sg)‖² + λ‖g‖₁ for the bottom layer."""
    r = mask * (x_obs - g @ p.S.T)
    return 0.5 * np.sum(r * r, axis=-1) + p.lam * np.sum(np.abs(g), axis=-1)


@dataclass
class MaskedSettleResult:
    result: BatchSettleResult
    x_hat: np.ndarray
    imputed: List[np.ndarray] = field(default_factory=list)
    objective: List[np.ndarray] = field(default_factory=list)


def masked_settle_batch(
    net: NetworkParams,
    X_obs: np.ndarray,
    mask: MaskSpec,
    cfg: SettleConfig,
    n_outer: int = 5,
) -> MaskedSettleResult:
    """Outer imputation loop around the settle with frozen dictionaries.

    Hidden entries are refilled from the bottom-layer synthesis and the
    network is re-settled, warm-started from the previous codes so that each
    inner solve can only lower its own energy.
    """
    if n_outer < 1:
        raise ValueError("n_outer must be >= 1")
    X_obs = np.atleast_2d(np.asarray(X_obs, dtype=np.float64))
    m = mask.mask
    if m.shape[0] != X_obs.shape[1]:
        raise DimensionError(0, "d (mask)", X_obs.shape[1], m.shape[0])
    p1 = net.layers[0]
    S1 = p1.S
    if np.all(m == 1):
        res = settle_batch(net, X_obs, cfg)
        return MaskedSettleResult(res, res.codes[0] @ S1.T, [X_obs.copy()],
                                  [masked_objective(p1, X_obs, m, res.codes[0])])
    hidden = m == 0
    x_k = np.where(hidden, 0.0, X_obs)
    res = settle_batch(net, x_k, cfg)
    imputed = [x_k]
    objective = [masked_objective(p1, X_obs, m, res.codes[0])]
    for _ in range(n_outer):
        x_k = np.where(hidden, res.codes[0] @ S1.T, X_obs)
        warm = replace(cfg, warm_start=res.codes)
        res = settle_batch(net, x_k, warm)
        imputed.append(x_k)
        objective.append(masked_objective(p1, X_obs, m, res.codes[0]))
    return MaskedSettleResult(res, res.codes[0] @ S1.T, imputed, objective)


def masked_settle(net, x_obs, mask: MaskSpec, cfg: SettleConfig, n_outer: int = 5):
    """Single-sample masked imputation; returns ``(SettleResult, x_hat)``."""
    out = masked_settle_batch(net, np.asarray(x_obs, dtype=np.float64)[None, :], mask, cfg, n_outer)
    return out.result.sample(0), out.x_hat[0]


def restrict_rows(net: NetworkParams, rows: np.ndarray) -> NetworkParams:
    """Copy of ``net`` whose bottom layer only sees the selected input rows.

    Settling the restricted network minimises the bottom-layer energy with the
    unselected rows masked out, which is the fixed point the outer imputation
    loop converges to.
    """
    layers = [p.copy() for p in net.layers]
    layers[0].S = layers[0].S[rows]
    return NetworkParams(layers)


def solve_layer(
    p: LayerParams,
    inp: LayerInput,
    tol: float = 1e-12,
    max_iter: int = 200_000,
    g0: Optional[np.ndarray] = None,
) -> np.ndarray:
    """High-accuracy minimiser of one layer's energy (no top-k cap).

    FISTA with function-value restart until successive iterates move less
    than ``tol`` (relative), then a Newton polish on the detected support:
    solve the reduced normal equations with the sign pattern fixed and keep
    the result if it satisfies the optimality conditions.
    """
    inp = LayerInput(np.asarray(inp.x, dtype=np.float64), inp.h_target)
    eta = 1.0 / lipschitz_constant(p, include_topdown=inp.h_target is not None)
    g = np.zeros(p.K) if g0 is None else np.asarray(g0, dtype=np.float64).copy()
    y, t = g.copy(), 1.0
    E = float(layer_energy(p, inp, g))
    restarted = False
    for _ in range(max_iter):
        g_new = soft_threshold(y - eta * smooth_gradient(p, inp, y), eta * p.lam)
        E_new = float(layer_energy(p, inp, g_new))
        if E_new > E + 1e-15 * abs(E):
            if restarted:  # a plain step from g cannot descend: round-off floor
                break
            y, t, restarted = g.copy(), 1.0, True
            continue
        restarted = False
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        y = g_new + ((t - 1.0) / t_new) * (g_new - g)
        step = np.max(np.abs(g_new - g))
        g, t, E = g_new, t_new, E_new
        if step <= tol * max(1.0, np.max(np.abs(g))):
            break
    else:
        raise SettleError(f"layer {p.index}: solver did not converge in {max_iter} iterations",
                          layer=p.index)
    return _polish(p, inp, g)


def _polish(p: LayerParams, inp: LayerInput, g: np.ndarray) -> np.ndarray:
    A = np.flatnonzero(g)
    if A.size == 0:
        return g
    H = p.S[:, A].T @ p.S[:, A]
    b = p.S[:, A].T @ inp.x
    if inp.h_target is not None:
        Ud = p.U_td[:, A]
        H = H + p.beta_td * Ud.T @ Ud
        b = b + p.beta_td * Ud.T @ inp.h_target
    try:
        gA = np.linalg.solve(H, b - p.lam * np.sign(g[A]))
    except np.linalg.LinAlgError:
        return g
    if np.any(np.sign(gA) != np.sign(g[A])):
        return g
    cand = np.zeros_like(g)
    cand[A] = gA
    grad = smooth_gradient(p, inp, cand)
    inactive = np.setdiff1d(np.arange(p.K), A)
    slack = 1e-9 * max(1.0, p.lam)
    if inactive.size and np.max(np.abs(grad[inactive])) > p.lam + slack:
        return g
    return cand
