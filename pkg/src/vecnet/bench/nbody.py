"""2D n-body dynamics with four force primitives and RK4 integration."""
from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

G_GRAV = 1.0
SOFTENING = 0.1
K_SPRING = 0.5
REST_LENGTH = 1.0
GAMMA_DRAG = 0.3
OMEGA_LORENTZ = 2.0

N_FEATURES = 22
MAX_NEIGHBORS = 4


class Force(str, enum.Enum):
    GRAVITY = "gravity"
    SPRING = "spring"
    DRAG = "drag"
    LORENTZ = "lorentz"


FORCE_ORDER = (Force.GRAVITY, Force.SPRING, Force.DRAG, Force.LORENTZ)
PAIRWISE = (Force.GRAVITY, Force.SPRING)


class SimulationError(RuntimeError):
    pass


@dataclass
class BodyState:
    positions: np.ndarray
    velocities: np.ndarray

    def __post_init__(self):
        self.positions = np.array(self.positions, dtype=np.float64).reshape(-1, 2)
        self.velocities = np.array(self.velocities, dtype=np.float64).reshape(-1, 2)
        if self.positions.shape != self.velocities.shape:
            raise ValueError("positions and velocities disagree in shape")
        if self.n < 1:
            raise ValueError("a state needs at least one body")
        if not (np.all(np.isfinite(self.positions)) and np.all(np.isfinite(self.velocities))):
            raise SimulationError("non-finite state")

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    def copy(self) -> "BodyState":
        return BodyState(self.positions.copy(), self.velocities.copy())


def _forces(forces) -> Tuple[Force, ...]:
    out = tuple(sorted({Force(f) for f in forces}, key=FORCE_ORDER.index))
    return out


@dataclass
class SimConfig:
    forces: Tuple[Force, ...] = (Force.GRAVITY,)
    dt: float = 0.005
    steps: int = 200
    box: float = 2.5
    position_damping: float = 0.98
    velocity_damping: float = 0.9
    boundary: bool = True

    def __post_init__(self):
        self.forces = _forces(self.forces)
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")


def force(kind, state: BodyState, i: int, j: Optional[int] = None) -> np.ndarray:
    """Force on body ``i`` (from ``j`` for the pairwise kinds); unit masses."""
    kind = Force(kind)
    v = state.velocities[i]
    if kind is Force.DRAG:
        return -GAMMA_DRAG * v
    if kind is Force.LORENTZ:
        return OMEGA_LORENTZ * np.array([-v[1], v[0]])
    if j is None or i == j:
        raise ValueError(f"{kind.value} needs a distinct partner body")
    d = state.positions[i] - state.positions[j]
    r = float(np.linalg.norm(d))
    if r == 0.0:
        return np.zeros(2)
    rhat = d / r
    if kind is Force.GRAVITY:
        return -G_GRAV * rhat / (r * r + SOFTENING**2)
    return -K_SPRING * (r - REST_LENGTH) * rhat


def accelerations(forces: Sequence[Force], pos: np.ndarray, vel: np.ndarray) -> np.ndarray:
    """Total acceleration on every body, pairwise kinds summed over j != i."""
    acc = np.zeros_like(pos)
    forces = _forces(forces)
    if any(f in PAIRWISE for f in forces) and pos.shape[0] > 1:
        d = pos[:, None, :] - pos[None, :, :]
        r = np.linalg.norm(d, axis=-1)
        np.fill_diagonal(r, 1.0)
        rhat = d / r[..., None]
        coincident = r == 0.0
        if Force.GRAVITY in forces:
            mag = -G_GRAV / (r * r + SOFTENING**2)
            np.fill_diagonal(mag, 0.0)
            mag[coincident] = 0.0
            acc += np.sum(mag[..., None] * rhat, axis=1)
        if Force.SPRING in forces:
            mag = -K_SPRING * (r - REST_LENGTH)
            np.fill_diagonal(mag, 0.0)
            mag[coincident] = 0.0
            acc += np.sum(mag[..., None] * rhat, axis=1)
    if Force.DRAG in forces:
        acc += -GAMMA_DRAG * vel
    if Force.LORENTZ in forces:
        acc += OMEGA_LORENTZ * np.stack([-vel[:, 1], vel[:, 0]], axis=1)
    return acc


AccelFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def soft_boundary(cfg: SimConfig, pos: np.ndarray, vel: np.ndarray):
    """Damp every body with a coordinate beyond the box half-width."""
    out = np.any(np.abs(pos) > cfg.box, axis=-1)
    pos = pos.copy()
    vel = vel.copy()
    pos[out] *= cfg.position_damping
    vel[out] *= cfg.velocity_damping
    return pos, vel


def rk4_integrate(x: np.ndarray, v: np.ndarray, h: float, accel_fn: AccelFn):
    """One classic RK4 step of x' = v, v' = a(x, v) for arrays of any shape."""
    a1 = accel_fn(x, v)
    x2, v2 = x + 0.5 * h * v, v + 0.5 * h * a1
    a2 = accel_fn(x2, v2)
    x3, v3 = x + 0.5 * h * v2, v + 0.5 * h * a2
    a3 = accel_fn(x3, v3)
    x4, v4 = x + h * v3, v + h * a3
    a4 = accel_fn(x4, v4)
    x_new = x + (h / 6.0) * (v + 2.0 * v2 + 2.0 * v3 + v4)
    v_new = v + (h / 6.0) * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
    if not (np.all(np.isfinite(x_new)) and np.all(np.isfinite(v_new))):
        raise SimulationError("non-finite state during RK4 step")
    return x_new, v_new


def rk4_step(cfg: SimConfig, state: BodyState, accel_fn: Optional[AccelFn] = None) -> BodyState:
    """Classic RK4 on (x, v), then damping of bodies outside the box.

    ``accel_fn(pos, vel)`` replaces the true force sum (used for model
    rollouts).
    """
    if accel_fn is None:
        accel_fn = lambda x, v: accelerations(cfg.forces, x, v)  # noqa: E731
    x_new, v_new = rk4_integrate(state.positions, state.velocities, cfg.dt, accel_fn)
    if cfg.boundary:
        x_new, v_new = soft_boundary(cfg, x_new, v_new)
    return BodyState(x_new, v_new)


@dataclass
class Trajectory:
    positions: np.ndarray  # (steps + 1, n, 2)
    velocities: np.ndarray


def simulate(cfg: SimConfig, state: BodyState, steps: Optional[int] = None,
             accel_fn: Optional[AccelFn] = None) -> Trajectory:
    steps = cfg.steps if steps is None else steps
    P = np.empty((steps + 1, state.n, 2))
    V = np.empty_like(P)
    P[0], V[0] = state.positions, state.velocities
    s = state
    for t in range(steps):
        s = rk4_step(cfg, s, accel_fn)
        P[t + 1], V[t + 1] = s.positions, s.velocities
    return Trajectory(P, V)


def initial_state(n: int, rng: np.random.Generator, box: float = 2.5) -> BodyState:
    pos = rng.uniform(-box, box, size=(n, 2))
    vel = rng.normal(0.0, 0.5, size=(n, 2))
    return BodyState(pos, vel)


class FeatureLayout(str, enum.Enum):
    FORCE_CHANNELS = "force_channels"
    KINEMATIC = "kinematic"


def _neighbour_index(pos: np.ndarray, i: int) -> np.ndarray:
    """Indices of the (up to four) nearest other bodies, nearest first."""
    others = np.delete(np.arange(pos.shape[0]), i)
    r = np.linalg.norm(pos[others] - pos[i], axis=1)
    return others[np.argsort(r, kind="stable")[:MAX_NEIGHBORS]]


def _neighbours(pos: np.ndarray, i: int):
    idx = _neighbour_index(pos, i)
    rel = pos[idx] - pos[i]
    return rel, np.linalg.norm(rel, axis=1)


def features(pos: np.ndarray, vel: np.ndarray, forces: Sequence[Force],
             layout=FeatureLayout.FORCE_CHANNELS) -> np.ndarray:
    """22 features per body; neighbours sorted by distance, zero padded.

    ``force_channels``: per-neighbour gravity kernel r̂_ji/(r² + ε²) (8) and
    spring kernel (r − r₀)·r̂_ji (8), own velocity (2) and its quarter turn
    (−v_y, v_x) (2), each block zeroed unless its force is active; then
    speed (1) and distance to the origin (1). Every force's contribution to
    the acceleration is linear in its own block, so mixed-force samples are
    sums of single-force blocks.

    ``kinematic``: own position (2), own velocity (2), then for each of up to
    four neighbours its relative position (2) and relative velocity (2),
    then speed (1) and distance to the origin (1). It carries no force
    identity, so mixed-force targets are not functions of it.
    """
    layout = FeatureLayout(layout)
    active = set(_forces(forces))
    n = pos.shape[0]
    out = np.zeros((n, N_FEATURES))
    if layout is FeatureLayout.KINEMATIC:
        out[:, 0:2] = pos
        out[:, 2:4] = vel
        for i in range(n):
            idx = _neighbour_index(pos, i)
            rel = np.concatenate([pos[idx] - pos[i], vel[idx] - vel[i]], axis=1)
            out[i, 4:4 + 4 * idx.size] = rel.ravel()
    else:
        for i in range(n):
            rel, r = _neighbours(pos, i)
            m = rel.shape[0]
            safe = np.where(r > 0, r, 1.0)[:, None]
            unit = np.where(r[:, None] > 0, rel / safe, 0.0)
            if Force.GRAVITY in active:
                out[i, 0:2 * m] = (G_GRAV * unit / (r * r + SOFTENING**2)[:, None]).ravel()
            if Force.SPRING in active:
                out[i, 8:8 + 2 * m] = (K_SPRING * (r - REST_LENGTH)[:, None] * unit).ravel()
        if Force.DRAG in active:
            out[:, 16:18] = vel
        if Force.LORENTZ in active:
            out[:, 18:20] = np.stack([-vel[:, 1], vel[:, 0]], axis=1)
    out[:, 20] = np.linalg.norm(vel, axis=1)
    out[:, 21] = np.linalg.norm(pos, axis=1)
    return out


@dataclass(frozen=True)
class Condition:
    forces: Tuple[Force, ...]
    n_bodies: int

    @property
    def name(self) -> str:
        return "+".join(f.value for f in self.forces) + f"/n{self.n_bodies}"


def id_conditions() -> List[Condition]:
    return [Condition((f,), 5) for f in FORCE_ORDER]


def ood_conditions(n_values: Iterable[int] = (5, 4, 3)) -> List[Condition]:
    out = []
    for size in range(2, len(FORCE_ORDER) + 1):
        for combo in itertools.combinations(FORCE_ORDER, size):
            for n in n_values:
                out.append(Condition(tuple(combo), n))
    return out


@dataclass
class NBodyData:
    features: np.ndarray  # (N, 22)
    targets: np.ndarray  # (N, 2)
    condition: np.ndarray  # (N,) index into ``conditions``
    conditions: List[Condition] = field(default_factory=list)

    def subset(self, mask: np.ndarray) -> "NBodyData":
        return NBodyData(self.features[mask], self.targets[mask], self.condition[mask], self.conditions)


def _sim_rng(seed: int, cond: Condition) -> np.random.Generator:
    key = [FORCE_ORDER.index(f) for f in cond.forces]
    return np.random.Generator(np.random.Philox(
        np.random.SeedSequence([int(seed), cond.n_bodies, *key, 7919])))


def generate_nbody_dataset(
    seeds: Sequence[int],
    forces: Sequence[Force],
    n_bodies: int,
    horizon: int = 200,
    stride: int = 1,
    cfg: Optional[SimConfig] = None,
    layout=FeatureLayout.FORCE_CHANNELS,
) -> NBodyData:
    """Per-body (features, true instantaneous acceleration) along simulated clips."""
    if n_bodies not in (3, 4, 5):
        raise ValueError(f"n_bodies must be 3, 4 or 5, got {n_bodies}")
    if horizon < 1 or stride < 1:
        raise ValueError("horizon and stride must be positive")
    cond = Condition(_forces(forces), n_bodies)
    sim = replace(cfg or SimConfig(), forces=cond.forces, steps=horizon)
    X, Y = [], []
    for seed in seeds:
        s = initial_state(n_bodies, _sim_rng(seed, cond), sim.box)
        traj = simulate(sim, s, horizon - 1)
        for t in range(0, horizon, stride):
            p, v = traj.positions[t], traj.velocities[t]
            X.append(features(p, v, cond.forces, layout))
            Y.append(accelerations(cond.forces, p, v))
    F = np.concatenate(X)
    T = np.concatenate(Y)
    return NBodyData(F, T, np.zeros(F.shape[0], dtype=int), [cond])


def concat(parts: Sequence[NBodyData]) -> NBodyData:
    conds: List[Condition] = []
    idx = []
    for part in parts:
        offset = len(conds)
        conds.extend(part.conditions)
        idx.append(part.condition + offset)
    return NBodyData(np.concatenate([p.features for p in parts]),
                     np.concatenate([p.targets for p in parts]),
                     np.concatenate(idx), conds)
