"""Property suites run at fixed instance sizes; each returns measured statistics."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List

import numpy as np

from .bench import nbody as nb
from .core import LayerInput, LayerParams, layer_energy, lipschitz_constant, unit_columns
from .inference import (
    NetworkParams,
    SettleConfig,
    layer_step,
    make_mask,
    masked_settle_batch,
    proximal_gradient,
    settle_batch,
    solve_layer,
)
from .learning import danskin_check
from .operator import (
    max_recoverable_k,
    mutual_coherence,
    numerical_rank,
    random_dictionary,
    recovery_trial,
    superposition_check,
    synthesize,
)
from .rng import stream


@dataclass
class SuiteResult:
    name: str
    passed: bool
    stats: Dict = field(default_factory=dict)
    seconds: float = 0.0

    def as_dict(self) -> Dict:
        return {"passed": bool(self.passed), "stats": _plain(self.stats), "seconds": round(self.seconds, 3)}


def _plain(v):
    """numpy scalars and containers to builtin JSON types."""
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    return v


def _random_layer(rng, d: int, K: int, m: int = 0, lam: float = 0.1, k_top=None) -> LayerParams:
    S = unit_columns(rng.standard_normal((d, K)))
    U = unit_columns(rng.standard_normal((m, K))) if m else None
    return LayerParams(S, U, lam=lam, k_top=k_top)


def descent(seed: int = 0, n_instances: int = 1000, n_steps: int = 25, slack: float = 1e-10) -> SuiteResult:
    """Every ISTA step with η = 1/L satisfies F(g⁺) ≤ F(g) − (L/2)‖g⁺ − g‖²."""
    rng = stream(seed, "verify", "descent")
    worst = -math.inf
    violations = 0
    for _ in range(n_instances):
        d, K = int(rng.integers(2, 33)), int(rng.integers(2, 65))
        m = int(rng.integers(1, 17)) if rng.random() < 0.5 else 0
        p = _random_layer(rng, d, K, m, lam=float(rng.uniform(0.0, 1.0)))
        inp = LayerInput(rng.standard_normal(d), rng.standard_normal(m) if m else None)
        L = lipschitz_constant(p, include_topdown=m > 0)
        g = rng.standard_normal(K) * (rng.random(K) < 0.5)
        F = float(layer_energy(p, inp, g))
        for _ in range(n_steps):
            g_new = layer_step(p, inp, g, 1.0 / L)
            F_new = float(layer_energy(p, inp, g_new))
            excess = (F_new - (F - 0.5 * L * float(np.sum((g_new - g) ** 2)))) / max(1.0, abs(F))
            worst = max(worst, excess)
            violations += excess > slack
            g, F = g_new, F_new
    return SuiteResult("descent", violations == 0,
                       {"instances": n_instances, "steps": n_instances * n_steps,
                        "violations": int(violations), "max_relative_excess": worst})


def danskin(seed: int = 0, n_instances: int = 100, tol: float = 1e-3, required: float = 0.95) -> SuiteResult:
    rng = stream(seed, "verify", "danskin")
    errors = []
    for _ in range(n_instances):
        p = _random_layer(rng, 8, 12, lam=0.3)
        rep = danskin_check(p, LayerInput(rng.standard_normal(8)), perturb_scale=1e-5,
                            n_entries=16, rng=rng, solve_tol=1e-12)
        errors.append(rep.max_rel_error)
    errors = np.array(errors)
    rate = float(np.mean(errors <= tol))
    return SuiteResult("danskin", rate >= required,
                       {"instances": n_instances, "pass_rate": rate, "tolerance": tol,
                        "median_max_rel_error": float(np.median(errors)),
                        "worst_max_rel_error": float(errors.max())})


def superposition(seed: int = 0, n_pairs: int = 10_000, tol: float = 1e-12) -> SuiteResult:
    rng = stream(seed, "verify", "superposition")
    p = _random_layer(rng, 32, 64)
    g1 = rng.standard_normal((n_pairs, 64)) * (rng.random((n_pairs, 64)) < 0.25)
    g2 = rng.standard_normal((n_pairs, 64)) * (rng.random((n_pairs, 64)) < 0.25)
    dev = superposition_check(p, g1, g2)
    return SuiteResult("superposition", dev <= tol, {"pairs": n_pairs, "max_deviation": dev})


def rank(seed: int = 0, n_settles: int = 100, k_top: int = 4) -> SuiteResult:
    rng = stream(seed, "verify", "rank")
    violations = 0
    ranks, supports = [], []
    for _ in range(n_settles):
        p = _random_layer(rng, 24, 48, m=16, lam=0.01, k_top=k_top)
        net = NetworkParams([p])
        res = settle_batch(net, rng.standard_normal((1, 24)), SettleConfig(max_sweeps=200, tol=1e-10))
        g = res.codes[0][0]
        r, nnz = numerical_rank(synthesize(p, g)), int(np.count_nonzero(g))
        ranks.append(r)
        supports.append(nnz)
        violations += not (r <= nnz <= k_top)
    return SuiteResult("rank", violations == 0,
                       {"settles": n_settles, "k_top": k_top, "violations": violations,
                        "max_rank": max(ranks), "max_support": max(supports)})


def recovery(seed: int = 0, n_trials: int = 200, d: int = 256, K: int = 320,
             required: float = 0.99) -> SuiteResult:
    """k is the largest support size satisfying the coherence bound of a
    representative dictionary; trials whose own dictionary misses the bound
    are counted separately."""
    mu0 = mutual_coherence(random_dictionary(d, K, "gaussian", stream(seed, "verify", "recovery")))
    k = max(1, max_recoverable_k(mu0, K))
    hits = in_bound = 0
    mus = []
    for t in range(n_trials):
        res = recovery_trial(d, K, k, noise=0.0, seed=seed * 100_003 + t)
        hits += res.success
        in_bound += res.bound_satisfied
        mus.append(res.mu)
    rate = hits / n_trials
    return SuiteResult("recovery", rate >= required and in_bound == n_trials,
                       {"trials": n_trials, "d": d, "K": K, "k": k, "success_rate": rate,
                        "trials_within_bound": in_bound, "max_mu": max(mus)})


def masked(seed: int = 0, n_instances: int = 50, n_outer: int = 5, slack: float = 1e-12) -> SuiteResult:
    """Observed entries of every imputed signal equal x_obs bit for bit and the
    masked objective never increases across outer iterations."""
    rng = stream(seed, "verify", "masked")
    regimes = ["forecast_25", "forecast_50", "random_30"]
    exact = monotone = 0
    worst = -math.inf
    for i in range(n_instances):
        p = _random_layer(rng, 64, 96, lam=0.05)
        net = NetworkParams([p])
        spec = make_mask(regimes[i % len(regimes)], 64, seed=i)
        x = p.S @ (rng.standard_normal(96) * (rng.random(96) < 0.1))
        X_obs = (x * spec.mask)[None, :]
        out = masked_settle_batch(net, X_obs, spec, SettleConfig(max_sweeps=500, tol=1e-12), n_outer)
        obs = spec.observed
        exact += all(np.array_equal(xk[:, obs], X_obs[:, obs]) for xk in out.imputed)
        obj = np.array([float(o[0]) for o in out.objective])
        rise = np.max((obj[1:] - obj[:-1]) / np.maximum(1.0, np.abs(obj[:-1])))
        worst = max(worst, float(rise))
        monotone += rise <= slack
    return SuiteResult("masked", exact == n_instances and monotone == n_instances,
                       {"instances": n_instances, "observed_exact": exact, "objective_monotone": monotone,
                        "max_relative_rise": worst})


def fista(seed: int = 0, n_instances: int = 100, n_iter: int = 100, required: int = 95) -> SuiteResult:
    rng = stream(seed, "verify", "fista")
    wins = 0
    ratios = []
    for _ in range(n_instances):
        p = _random_layer(rng, 64, 128, lam=0.1)
        inp = LayerInput(rng.standard_normal(64))
        F_opt = float(layer_energy(p, inp, solve_layer(p, inp, tol=1e-13)))
        _, ista = proximal_gradient(p, inp, n_iter, accelerate=False)
        _, fst = proximal_gradient(p, inp, n_iter, accelerate=True)
        gi, gf = ista[-1] - F_opt, fst[-1] - F_opt
        wins += gf <= gi
        ratios.append(gf / gi if gi > 0 else 0.0)
    return SuiteResult("fista", wins >= required,
                       {"instances": n_instances, "iterations": n_iter, "fista_wins": int(wins),
                        "median_gap_ratio": float(np.median(ratios))})


def circular_orbit(dt: float):
    """Two unit masses a unit distance apart on their softened circular orbit.

    Returns the state, the exact state after one period and the step count.
    """
    force = nb.G_GRAV / (1.0 + nb.SOFTENING**2)
    v = math.sqrt(0.5 * force)
    period = 2.0 * math.pi * 0.5 / v
    steps = int(round(period / dt))
    t_end = steps * dt
    omega = v / 0.5
    pos = np.array([[0.5, 0.0], [-0.5, 0.0]])
    vel = np.array([[0.0, v], [0.0, -v]])
    a = omega * t_end
    rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    return nb.BodyState(pos, vel), pos @ rot.T, steps


def rk4(seed: int = 0, dt: float = 0.01, ratio_range=(10.0, 22.0), ke_tol: float = 1e-6) -> SuiteResult:
    """Convergence ratio of the one-period endpoint error against the exact
    circular orbit, and kinetic-energy drift under the Lorentz force alone."""
    errors = []
    for h in (dt, dt / 2, dt / 4):
        state, exact, steps = circular_orbit(h)
        cfg = nb.SimConfig(forces=(nb.Force.GRAVITY,), dt=h, boundary=False)
        traj = nb.simulate(cfg, state, steps)
        errors.append(float(np.max(np.abs(traj.positions[-1] - exact))))
    ratios = [errors[0] / errors[1], errors[1] / errors[2]]
    rng = stream(seed, "verify", "rk4")
    cfg = nb.SimConfig(forces=(nb.Force.LORENTZ,), boundary=False)
    traj = nb.simulate(cfg, nb.initial_state(5, rng), 1000)
    ke = 0.5 * np.sum(traj.velocities**2, axis=(1, 2))
    drift = float(np.max(np.abs(ke - ke[0])))
    ok = all(ratio_range[0] <= r <= ratio_range[1] for r in ratios) and drift <= ke_tol
    return SuiteResult("rk4", ok, {"endpoint_errors": errors, "ratios": ratios,
                                   "order": [math.log2(r) for r in ratios],
                                   "lorentz_ke_drift": drift})


SUITES: Dict[str, Callable[..., SuiteResult]] = {
    "descent": descent,
    "danskin": danskin,
    "superposition": superposition,
    "rank": rank,
    "recovery": recovery,
    "masked": masked,
    "fista": fista,
    "rk4": rk4,
}


def run_suites(names: List[str], seed: int = 0) -> Dict:
    if names == ["all"]:
        names = list(SUITES)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise KeyError(f"unknown suite(s): {', '.join(unknown)}")
    report = {"seed": seed, "suites": {}}
    for name in names:
        t0 = time.perf_counter()
        res = SUITES[name](seed=seed)
        res.seconds = time.perf_counter() - t0
        report["suites"][name] = res.as_dict()
    report["passed"] = all(s["passed"] for s in report["suites"].values())
    return report
