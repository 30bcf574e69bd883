"""1D function-composition signals: single primitives and their compositions."""
from __future__ import annotations

import enum
import math
import zlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

D_DEFAULT = 512
AMPLITUDE = (0.5, 2.0)
FREQUENCIES = (1, 2, 3, 4, 5)


class Difficulty(str, enum.Enum):
    ID = "id"
    EASY_OOD = "easy_ood"
    HARD_OOD = "hard_ood"


class Family(str, enum.Enum):
    SIN = "sin"
    COS = "cos"
    POLY = "poly"
    GAUSS = "gauss"


@dataclass
class SignalSample:
    t_grid: np.ndarray
    values: np.ndarray
    descriptor: Dict
    difficulty: Difficulty
    components: List[np.ndarray] = field(default_factory=list)


def t_grid(D: int = D_DEFAULT) -> np.ndarray:
    return np.linspace(0.0, 2.0 * math.pi, D)


def primitive(family, t: np.ndarray, a: float, f: int, phi: float = 0.0) -> np.ndarray:
    family = Family(family)
    if family is Family.SIN:
        return a * np.sin(f * t + phi)
    if family is Family.COS:
        return a * np.cos(f * t + phi)
    if family is Family.POLY:
        return a * (t / (2.0 * math.pi)) ** f
    return a * np.exp(-0.3 * f * (t - math.pi) ** 2)


def _draw_params(rng: np.random.Generator) -> Tuple[float, int, float]:
    a = float(rng.uniform(*AMPLITUDE))
    f = int(rng.choice(FREQUENCIES))
    phi = float(rng.uniform(0.0, 2.0 * math.pi))
    return a, f, phi


def _hard_templates():
    tau = lambda t: t / (2.0 * math.pi)  # noqa: E731
    return [
        ("nested_sin_cos",
         lambda t, a, f, phi: np.sin(np.cos(f[0] * t) + f[1] * tau(t)) + a * np.cos(f[2] * tau(t) ** 2)),
        ("product_sin_cos",
         lambda t, a, f, phi: a * np.sin(f[0] * t) * np.cos(f[1] * t + phi)),
        ("modulated_bump",
         lambda t, a, f, phi: a * np.exp(-0.3 * f[0] * (t - math.pi) ** 2) * np.sin(f[1] * t + phi)),
        ("warped_phase",
         lambda t, a, f, phi: np.sin(f[0] * t + a * np.cos(f[1] * t)) + 0.5 * a * tau(t) ** f[2]),
    ]


HARD_TEMPLATES = tuple(name for name, _ in _hard_templates())


def _rng(seed: int, difficulty: Difficulty) -> np.random.Generator:
    key = zlib.crc32(difficulty.value.encode())
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, key])))


def sample_signal(seed: int, difficulty, D: int = D_DEFAULT) -> SignalSample:
    """Pure function of (seed, difficulty, D)."""
    difficulty = Difficulty(difficulty)
    rng = _rng(seed, difficulty)
    t = t_grid(D)
    families = list(Family)
    if difficulty is Difficulty.ID:
        fam = families[int(rng.integers(len(families)))]
        a, f, phi = _draw_params(rng)
        v = primitive(fam, t, a, f, phi)
        desc = {"family": fam.value, "a": a, "f": f, "phi": phi}
        return SignalSample(t, v, desc, difficulty, [v])
    if difficulty is Difficulty.EASY_OOD:
        i, j = rng.choice(len(families), size=2, replace=False)
        parts, descs = [], []
        for fam in (families[i], families[j]):
            a, f, phi = _draw_params(rng)
            parts.append(primitive(fam, t, a, f, phi))
            descs.append({"family": fam.value, "a": a, "f": f, "phi": phi})
        return SignalSample(t, parts[0] + parts[1], {"sum": descs}, difficulty, parts)
    templates = _hard_templates()
    k = int(rng.integers(len(templates)))
    name, fn = templates[k]
    a = float(rng.uniform(*AMPLITUDE))
    f = [int(x) for x in rng.choice(FREQUENCIES, size=3)]
    phi = float(rng.uniform(0.0, 2.0 * math.pi))
    v = fn(t, a, f, phi)
    return SignalSample(t, v, {"template": name, "a": a, "f": f, "phi": phi}, difficulty)


def signal_matrix(n: int, difficulty, seed: int = 0, D: int = D_DEFAULT) -> np.ndarray:
    """(n, D) array of samples ``seed·n + i`` for i < n."""
    if n < 1:
        raise ValueError("n must be positive")
    base = int(seed) * 1_000_003
    return np.stack([sample_signal(base + i, difficulty, D).values for i in range(n)])
