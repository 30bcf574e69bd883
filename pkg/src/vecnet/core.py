"""Layer types, the layer-local energy and its proximal machinery.

Every function here accepts either a single sample (``g`` of shape ``(K,)``)
or a batch (``g`` of shape ``(B, K)``); batched inputs give batched outputs.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np


class DimensionError(ValueError):
    """Raised when array shapes disagree with a layer's dimensions."""

    def __init__(self, layer: int, dimension: str, expected: int, got: int):
        self.layer = layer
        self.dimension = dimension
        self.expected = expected
        self.got = got
        super().__init__(
            f"layer {layer}: dimension {dimension!r} expected {expected}, got {got}"
        )


class LipschitzError(RuntimeError):
    """Power iteration did not reach tolerance; ``estimate`` is the last iterate."""

    def __init__(self, estimate: float, iterations: int):
        self.estimate = estimate
        self.iterations = iterations
        super().__init__(
            f"power iteration did not converge after {iterations} iterations "
            f"(last estimate {estimate:.6g})"
        )


class Activation(str, enum.Enum):
    IDENTITY = "identity"
    RELU = "relu"

    def __call__(self, z: np.ndarray) -> np.ndarray:
        if self is Activation.RELU:
            return np.maximum(z, 0.0)
        return z


@dataclass(frozen=True)
class LayerDims:
    d: int
    m: int
    K: int

    def __post_init__(self):
        for name in ("d", "m", "K"):
            if getattr(self, name) < 1:
                raise ValueError(f"LayerDims.{name} must be >= 1")


@dataclass
class LayerParams:
    """One VN layer.

    ``S`` (d x K) reconstructs the layer input, ``U`` (m x K) emits the upward
    message. ``U_down`` is an optional untied dictionary used by the top-down
    consistency term; when absent the tied ``U`` is used for both roles.
    ``eta`` / ``eta_bottom_only`` of ``None`` mean "derive from the Lipschitz
    constant".
    """

    S: np.ndarray
    U: Optional[np.ndarray] = None
    lam: float = 0.1
    beta_td: float = 1.0
    k_top: Optional[int] = None
    activation: Activation = Activation.IDENTITY
    eta: Optional[float] = None
    eta_bottom_only: Optional[float] = None
    U_down: Optional[np.ndarray] = None
    index: int = 0

    def __post_init__(self):
        self.S = np.asarray(self.S, dtype=np.float64)
        if self.S.ndim != 2:
            raise ValueError("S must be a 2-D array")
        if self.U is not None:
            self.U = np.asarray(self.U, dtype=np.float64)
            if self.U.ndim != 2 or self.U.shape[1] != self.S.shape[1]:
                raise DimensionError(self.index, "K (U columns)", self.S.shape[1],
                                     self.U.shape[1] if self.U.ndim == 2 else -1)
        if self.U_down is not None:
            if self.U is None:
                raise ValueError("U_down requires a forward U")
            self.U_down = np.asarray(self.U_down, dtype=np.float64)
            if self.U_down.shape != self.U.shape:
                raise DimensionError(self.index, "U_down shape", self.U.shape[0],
                                     self.U_down.shape[0])
        self.activation = Activation(self.activation)
        if self.lam < 0:
            raise ValueError(f"layer {self.index}: lambda must be >= 0")
        if self.beta_td < 0:
            raise ValueError(f"layer {self.index}: beta_td must be >= 0")
        if self.k_top is not None and not 1 <= self.k_top <= self.K:
            raise ValueError(f"layer {self.index}: k_top must lie in [1, {self.K}]")
        for name in ("eta", "eta_bottom_only"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ValueError(f"layer {self.index}: {name} must be positive")

    @property
    def K(self) -> int:
        return self.S.shape[1]

    @property
    def d(self) -> int:
        return self.S.shape[0]

    @property
    def m(self) -> int:
        return 0 if self.U is None else self.U.shape[0]

    @property
    def dims(self) -> LayerDims:
        return LayerDims(self.d, max(self.m, 1), self.K)

    @property
    def tied(self) -> bool:
        return self.U_down is None

    @property
    def U_td(self) -> Optional[np.ndarray]:
        """Dictionary used by the top-down consistency term."""
        return self.U if self.U_down is None else self.U_down

    def copy(self) -> "LayerParams":
        return replace(
            self,
            S=self.S.copy(),
            U=None if self.U is None else self.U.copy(),
            U_down=None if self.U_down is None else self.U_down.copy(),
        )


@dataclass
class LayerInput:
    x: np.ndarray
    h_target: Optional[np.ndarray] = None


def _check(p: LayerParams, inp: LayerInput, g: np.ndarray) -> None:
    if np.shape(g)[-1] != p.K:
        raise DimensionError(p.index, "K", p.K, np.shape(g)[-1])
    if np.shape(inp.x)[-1] != p.d:
        raise DimensionError(p.index, "d", p.d, np.shape(inp.x)[-1])
    if inp.h_target is not None:
        if p.U is None:
            raise DimensionError(p.index, "m", 0, np.shape(inp.h_target)[-1])
        if np.shape(inp.h_target)[-1] != p.m:
            raise DimensionError(p.index, "m", p.m, np.shape(inp.h_target)[-1])


def smooth_energy(p: LayerParams, inp: LayerInput, g: np.ndarray) -> np.ndarray:
    """Quadratic part of the layer energy (reconstruction + top-down)."""
    _check(p, inp, g)
    r = inp.x - g @ p.S.T
    e = 0.5 * np.sum(r * r, axis=-1)
    if inp.h_target is not None:
        rh = inp.h_target - g @ p.U_td.T
        e = e + 0.5 * p.beta_td * np.sum(rh * rh, axis=-1)
    return e


def layer_energy(p: LayerParams, inp: LayerInput, g: np.ndarray) -> np.ndarray:
    """½‖x − Sg‖² + λ‖g‖₁ + (β/2)‖h − Ug‖², top-down term only when h is given."""
    return smooth_energy(p, inp, g) + p.lam * np.sum(np.abs(g), axis=-1)


def smooth_gradient(p: LayerParams, inp: LayerInput, g: np.ndarray) -> np.ndarray:
    _check(p, inp, g)
    grad = (g @ p.S.T - inp.x) @ p.S
    if inp.h_target is not None:
        Ud = p.U_td
        grad = grad + p.beta_td * ((g @ Ud.T - inp.h_target) @ Ud)
    return grad


def soft_threshold(z: np.ndarray, tau) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if np.any(np.asarray(tau) < 0):
        raise ValueError("threshold must be non-negative")
    return np.sign(z) * np.maximum(np.abs(z) - tau, 0.0)


def topk_project(g: np.ndarray, k: int) -> np.ndarray:
    """Keep the k largest-magnitude entries along the last axis.

    Equal magnitudes are resolved in favour of the lower index.
    """
    g = np.asarray(g, dtype=np.float64)
    n = g.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    if k == n:
        return g.copy()
    mag = np.abs(g)
    # k-th largest magnitude; everything above it stays, ties fill by index
    kth = -np.partition(-mag, k - 1, axis=-1)[..., k - 1 : k]
    above = mag > kth
    need = k - np.sum(above, axis=-1, keepdims=True)
    tie = mag == kth
    keep = above | (tie & (np.cumsum(tie, axis=-1) <= need))
    return np.where(keep, g, 0.0)


def _start_vector(n: int) -> np.ndarray:
    # fixed start keeps the estimate deterministic
    v = np.random.default_rng(12345).standard_normal(n)
    return v / np.linalg.norm(v)


def hessian(p: LayerParams, include_topdown: bool) -> np.ndarray:
    H = p.S.T @ p.S
    if include_topdown and p.U_td is not None:
        H = H + p.beta_td * (p.U_td.T @ p.U_td)
    return H


# above this many atoms the dense eigensolver gives way to power iteration
DENSE_EIG_MAX = 2048


def power_iteration(H: np.ndarray, tol: float = 1e-6, max_iter: int = 1000) -> float:
    """Largest eigenvalue of a symmetric PSD matrix.

    Stops once the eigen-residual ‖Hv − ρv‖ is at most ``tol·ρ``; raises
    :class:`LipschitzError` with the last estimate after ``max_iter`` steps.
    """
    v = _start_vector(H.shape[0])
    rho = 0.0
    for it in range(1, max_iter + 1):
        w = H @ v
        rho = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            raise LipschitzError(0.0, it)
        if np.linalg.norm(w - rho * v) <= tol * abs(rho):
            return rho
        v = w / nw
    raise LipschitzError(rho, max_iter)


def lipschitz_constant(
    p: LayerParams,
    include_topdown: bool = True,
    tol: float = 1e-6,
    max_iter: int = 1000,
    method: str = "auto",
) -> float:
    """Largest eigenvalue of SᵀS (+ β·UᵀU).

    ``method="auto"`` uses a dense symmetric eigensolver up to
    ``DENSE_EIG_MAX`` atoms (exact to round-off, so 1/L never overshoots) and
    power iteration beyond that; ``"power"`` forces power iteration.
    """
    H = hessian(p, include_topdown)
    if not np.all(np.isfinite(H)):
        raise ValueError(f"layer {p.index}: non-finite dictionary entries")
    if method == "power" or (method == "auto" and H.shape[0] > DENSE_EIG_MAX):
        return power_iteration(H, tol, max_iter)
    if method not in ("auto", "dense"):
        raise ValueError(f"unknown method {method!r}")
    return float(np.linalg.eigvalsh(H)[-1])


def unit_columns(A: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(A, axis=0)
    n[n == 0] = 1.0
    return A / n
