"""Gaussian-bump spatial decoding task on an N x N grid."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np


class Encoding(str, enum.Enum):
    BUMP = "bump"
    ONE_HOT = "one_hot"
    FOURIER_14 = "fourier_14"
    FOURIER_7 = "fourier_7"
    SCALAR = "scalar"


class HoldoutKind(str, enum.Enum):
    SQUARE = "square"
    ANNULUS = "annulus"
    NONE = "none"


@dataclass(frozen=True)
class Holdout:
    """Region of bump centres excluded from training.

    ``SQUARE``: |c − c0|∞ < ``half_side`` (half-open on the far edges);
    ``ANNULUS``: r_in ≤ ‖c − c0‖ ≤ r_out. ``c0`` is the grid centre.
    """

    kind: HoldoutKind = HoldoutKind.SQUARE
    half_side: float = 4.0
    r_in: float = 7.0
    r_out: float = 10.0

    def contains(self, centers: np.ndarray, grid_n: int) -> np.ndarray:
        c = np.atleast_2d(np.asarray(centers, dtype=np.float64)) - (grid_n - 1) / 2.0
        kind = HoldoutKind(self.kind)
        if kind is HoldoutKind.NONE:
            return np.zeros(c.shape[0], dtype=bool)
        if kind is HoldoutKind.SQUARE:
            return np.all((c >= -self.half_side) & (c < self.half_side), axis=1)
        r = np.linalg.norm(c, axis=1)
        return (r >= self.r_in) & (r <= self.r_out)

    def validate(self, grid_n: int) -> None:
        kind = HoldoutKind(self.kind)
        half = (grid_n - 1) / 2.0
        if kind is HoldoutKind.SQUARE and not 0 <= self.half_side < half:
            raise ValueError("square holdout must lie strictly inside the grid")
        if kind is HoldoutKind.ANNULUS and not 0 <= self.r_in <= self.r_out < half:
            raise ValueError("annulus holdout must lie strictly inside the grid")


_ENC_DIMS = {Encoding.BUMP: 56, Encoding.ONE_HOT: 56, Encoding.FOURIER_14: 56,
             Encoding.FOURIER_7: 28, Encoding.SCALAR: 2}


@dataclass
class BumpTaskConfig:
    grid_n: int = 28
    sigma: float = 1.0
    holdout: Holdout = field(default_factory=Holdout)
    encoding: Encoding = Encoding.BUMP
    n_bumps: int = 1

    def __post_init__(self):
        self.encoding = Encoding(self.encoding)
        if isinstance(self.holdout, dict):
            self.holdout = Holdout(**self.holdout)
        if self.grid_n < 4:
            raise ValueError("grid_n must be at least 4")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.n_bumps < 1:
            raise ValueError("n_bumps must be positive")
        self.holdout.validate(self.grid_n)

    @property
    def encoding_dim(self) -> int:
        if self.grid_n == 28:
            return _ENC_DIMS[self.encoding]
        return 2 * self.axis_encoding_dim

    @property
    def axis_encoding_dim(self) -> int:
        e = self.encoding
        if e in (Encoding.BUMP, Encoding.ONE_HOT):
            return self.grid_n
        if e is Encoding.FOURIER_14:
            return 28
        if e is Encoding.FOURIER_7:
            return 14
        return 1


def _check_centers(cfg: BumpTaskConfig, centers) -> np.ndarray:
    c = np.asarray(centers, dtype=np.float64)
    if c.size == 0:
        raise ValueError("at least one centre is required")
    c = c.reshape(-1, 2)
    if np.any(c < 0) or np.any(c > cfg.grid_n - 1):
        raise ValueError(f"centres must lie in [0, {cfg.grid_n - 1}]")
    return c


def axis_profile(cfg: BumpTaskConfig, c) -> np.ndarray:
    """1D Gaussian exp(−(k − c)²/(2σ²)) over k = 0..N−1; batched over ``c``."""
    k = np.arange(cfg.grid_n, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    return np.exp(-((k - c[..., None]) ** 2) / (2.0 * cfg.sigma**2))


def bump_image(cfg: BumpTaskConfig, centers) -> np.ndarray:
    """Sum of unit-peak Gaussians, flattened row-major (row = y)."""
    c = _check_centers(cfg, centers)
    img = np.zeros((cfg.grid_n, cfg.grid_n))
    for cx, cy in c:
        img += np.outer(axis_profile(cfg, cy), axis_profile(cfg, cx))
    return img.ravel()


def axis_encoding(cfg: BumpTaskConfig, c) -> np.ndarray:
    """Encoding of one coordinate; batched over ``c``."""
    c = np.asarray(c, dtype=np.float64)
    N = cfg.grid_n
    e = cfg.encoding
    if e is Encoding.BUMP:
        return axis_profile(cfg, c)
    if e is Encoding.ONE_HOT:
        out = np.zeros(c.shape + (N,))
        idx = np.clip(np.rint(c).astype(int), 0, N - 1)
        np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
        return out
    if e is Encoding.SCALAR:
        return (c / N)[..., None]
    m = 14 if e is Encoding.FOURIER_14 else 7
    j = np.arange(1, m + 1)
    ang = 2.0 * np.pi * j * c[..., None] / N
    return np.stack([np.sin(ang), np.cos(ang)], axis=-1).reshape(c.shape + (2 * m,))


def encode_position(cfg: BumpTaskConfig, cx, cy) -> np.ndarray:
    """[axis code of x ; axis code of y]."""
    c = _check_centers(cfg, np.stack([np.asarray(cx, float), np.asarray(cy, float)], axis=-1))
    out = np.concatenate([axis_encoding(cfg, c[:, 0]), axis_encoding(cfg, c[:, 1])], axis=-1)
    return out[0] if np.ndim(cx) == 0 else out


def sample_centers(cfg: BumpTaskConfig, n: int, rng: np.random.Generator,
                   in_holdout: bool, max_tries: int = 1000) -> np.ndarray:
    """``n`` continuous centres drawn uniformly inside or outside the holdout."""
    out = np.empty((0, 2))
    for _ in range(max_tries):
        if out.shape[0] >= n:
            break
        c = rng.uniform(0.0, cfg.grid_n - 1, size=(max(2 * n, 64), 2))
        keep = cfg.holdout.contains(c, cfg.grid_n) == in_holdout
        out = np.concatenate([out, c[keep]])
    if out.shape[0] < n:
        raise ValueError("holdout region is empty or covers the whole grid")
    return out[:n]
