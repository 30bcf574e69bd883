"""Experiment configuration: nested dataclasses, YAML files, VN_* overrides."""
from __future__ import annotations

import copy
import dataclasses
import enum
import os
import typing
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional

import yaml

from .inference import SettleConfig
from .learning import TrainerConfig


class ConfigError(ValueError):
    """Invalid configuration; ``path`` is the dotted key that is at fault."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class Benchmark(str, enum.Enum):
    BUMP = "bump"
    FUNCS = "funcs"
    NBODY = "nbody"


class Init(str, enum.Enum):
    EXEMPLAR = "exemplar"  # bottom atoms copied from training samples
    AXIS = "axis"  # bump task: separate x-axis and y-axis exemplar atoms
    GAUSSIAN = "gaussian"


@dataclass
class NetworkSpec:
    """Layer widths K_l, interface widths m_l (one fewer), per-layer k_top.

    λ follows the geometric depth schedule λ_l = lam·lam_ratio^l.
    """

    widths: List[int] = field(default_factory=lambda: [256])
    interfaces: List[int] = field(default_factory=list)
    k_top: List[Optional[int]] = field(default_factory=lambda: [16])
    lam: float = 0.01
    lam_ratio: float = 1.5
    beta_td: float = 1.0
    activation: str = "identity"
    init: Init = Init.EXEMPLAR


@dataclass
class BumpSpec:
    grid_n: int = 28
    sigma: float = 1.0
    encoding: str = "bump"
    holdout: str = "square"
    holdout_half_side: float = 4.0
    annulus: List[float] = field(default_factory=lambda: [7.0, 10.0])
    n_train: int = 4000
    n_test: int = 300
    superposition: List[int] = field(default_factory=lambda: [2, 3])
    n_superposition: int = 200
    error_map: bool = True


@dataclass
class FuncsSpec:
    length: int = 512
    n_train: int = 2000
    n_test: int = 200
    regimes: List[str] = field(
        default_factory=lambda: ["forecast_25", "forecast_50", "random_30", "block_128"])
    n_outer: int = 5


@dataclass
class NBodySpec:
    layout: str = "force_channels"
    train_sims: int = 10
    test_sims: int = 3
    horizon: int = 200
    stride: int = 4
    n_values: List[int] = field(default_factory=lambda: [5, 4, 3])
    label_weight: float = 1.0
    rollout_conditions: List[str] = field(default_factory=lambda: ["spring/n5", "drag+lorentz/n5"])
    rollout_initial_conditions: int = 4
    rollout_steps: int = 999
    drag_only_probe: bool = True


@dataclass
class ExperimentConfig:
    benchmark: Benchmark = Benchmark.BUMP
    seed: int = 0
    n_seeds: int = 3
    epochs: int = 10
    network: NetworkSpec = field(default_factory=NetworkSpec)
    settle: SettleConfig = field(default_factory=lambda: SettleConfig(max_sweeps=200, tol=1e-8, accelerate=True))
    eval_settle: SettleConfig = field(default_factory=lambda: SettleConfig(max_sweeps=200, tol=1e-8, accelerate=True))
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    bump: BumpSpec = field(default_factory=BumpSpec)
    funcs: FuncsSpec = field(default_factory=FuncsSpec)
    nbody: NBodySpec = field(default_factory=NBodySpec)

    def seeds(self) -> List[int]:
        return [self.seed + i for i in range(self.n_seeds)]


def default_config(benchmark="bump") -> ExperimentConfig:
    b = Benchmark(benchmark)
    if b is Benchmark.BUMP:
        return ExperimentConfig(
            benchmark=b, epochs=10,
            network=NetworkSpec(widths=[256], k_top=[16], lam=0.01, init=Init.AXIS),
            trainer=TrainerConfig(rho_s=1e-3, rho_u=1e-3, batch_size=64),
        )
    if b is Benchmark.FUNCS:
        return ExperimentConfig(
            benchmark=b, epochs=4,
            network=NetworkSpec(widths=[256, 128, 64], interfaces=[64, 32],
                                k_top=[None, None, 8], lam=0.01, init=Init.EXEMPLAR),
            settle=SettleConfig(max_sweeps=50, tol=1e-6, accelerate=True),
            eval_settle=SettleConfig(max_sweeps=50, tol=1e-6, accelerate=True),
            trainer=TrainerConfig(rho_s=1e-3, rho_u=1e-3, batch_size=32),
        )
    return ExperimentConfig(
        benchmark=b, epochs=2,
        network=NetworkSpec(widths=[512], k_top=[None], lam=0.001, init=Init.EXEMPLAR),
        settle=SettleConfig(max_sweeps=300, tol=1e-9, accelerate=True),
        eval_settle=SettleConfig(max_sweeps=300, tol=1e-9, accelerate=True),
        trainer=TrainerConfig(rho_s=1e-2, rho_u=1e-2, use_adaptive_moments=False, batch_size=64),
    )


# -- (de)serialisation --------------------------------------------------------


def _plain(v):
    if isinstance(v, enum.Enum):
        return v.value
    if dataclasses.is_dataclass(v):
        return {f.name: _plain(getattr(v, f.name)) for f in dataclasses.fields(v)
                if not (f.name == "warm_start")}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def to_dict(cfg: ExperimentConfig) -> Dict[str, Any]:
    return _plain(cfg)


def dump_yaml(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False, default_flow_style=None)


def _coerce(tp, value, path):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, path)
    if origin in (list, List):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        return [_coerce(args[0], v, f"{path}[{i}]") for i, v in enumerate(value)]
    if origin in (tuple, typing.Tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, "expected a list")
        return tuple(_coerce(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, Mapping):
            raise ConfigError(path, "expected a mapping")
        return _build(tp, value, path)
    if isinstance(tp, type) and issubclass(tp, enum.Enum):
        try:
            return tp(value)
        except ValueError:
            choices = ", ".join(m.value for m in tp)
            raise ConfigError(path, f"must be one of {{{choices}}}, got {value!r}") from None
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    return value


def _build(cls, data: Mapping, path: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for k in data:
        if k not in names:
            raise ConfigError(f"{path}.{k}" if path else str(k), "unknown key")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            sub = f"{path}.{f.name}" if path else f.name
            kwargs[f.name] = _coerce(hints[f.name], data[f.name], sub)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        # validators start their messages with the offending field name
        msg = str(exc)
        head = msg.split(" ", 1)[0]
        if head in names:
            raise ConfigError(f"{path}.{head}" if path else head, msg) from None
        raise ConfigError(path or "<root>", msg) from None


def _merge(base: Dict, over: Mapping) -> Dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def env_overrides(environ: Optional[Mapping[str, str]] = None) -> Dict:
    """``VN_NETWORK__LAM=0.02`` → {"network": {"lam": 0.02}}; values parsed as YAML."""
    environ = os.environ if environ is None else environ
    out: Dict = {}
    for key, raw in sorted(environ.items()):
        if not key.startswith("VN_") or key == "VN_":
            continue
        parts = [p.lower() for p in key[3:].split("__")]
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(raw)
    return out


def from_dict(data: Mapping, environ: Optional[Mapping[str, str]] = None) -> ExperimentConfig:
    """Defaults for the named benchmark, then ``data``, then VN_* overrides."""
    if not isinstance(data, Mapping):
        raise ConfigError("<root>", "config must be a mapping")
    merged = dict(data)
    env = env_overrides(environ)
    merged = _merge(merged, env)
    bench = merged.get("benchmark", "bump")
    try:
        base = to_dict(default_config(bench))
    except ValueError:
        raise ConfigError("benchmark", f"must be one of {{bump, funcs, nbody}}, got {bench!r}") from None
    cfg = _build(ExperimentConfig, _merge(base, merged), "")
    validate(cfg)
    return cfg


def load(path: str, environ: Optional[Mapping[str, str]] = None) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"not valid YAML: {exc}") from None
    except OSError as exc:
        raise ConfigError("<file>", str(exc)) from None
    return from_dict(data, environ)


def validate(cfg: ExperimentConfig) -> None:
    n = cfg.network
    L = len(n.widths)
    if L < 1:
        raise ConfigError("network.widths", "at least one layer is required")
    if any(k < 1 for k in n.widths):
        raise ConfigError("network.widths", "widths must be positive")
    if len(n.interfaces) != L - 1:
        raise ConfigError("network.interfaces", f"needs {L - 1} entries for {L} layers")
    if any(m < 1 for m in n.interfaces):
        raise ConfigError("network.interfaces", "interface widths must be positive")
    if len(n.k_top) != L:
        raise ConfigError("network.k_top", f"needs {L} entries")
    for i, (k, K) in enumerate(zip(n.k_top, n.widths)):
        if k is not None and not 1 <= k <= K:
            raise ConfigError(f"network.k_top[{i}]", f"must lie in [1, {K}]")
    if n.lam < 0:
        raise ConfigError("network.lam", "lambda must be >= 0")
    if n.lam_ratio <= 0:
        raise ConfigError("network.lam_ratio", "must be positive")
    if n.beta_td < 0:
        raise ConfigError("network.beta_td", "must be >= 0")
    if n.activation not in ("identity", "relu"):
        raise ConfigError("network.activation", "must be identity or relu")
    if cfg.epochs < 0:
        raise ConfigError("epochs", "must be >= 0")
    if cfg.n_seeds < 1:
        raise ConfigError("n_seeds", "must be >= 1")
    b = cfg.benchmark
    if b is Benchmark.BUMP:
        s = cfg.bump
        if s.n_train < 1 or s.n_test < 1:
            raise ConfigError("bump.n_train", "sample counts must be positive")
        if n.init is Init.AXIS and n.widths[0] < 2:
            raise ConfigError("network.widths", "axis init needs at least two atoms")
        if any(k < 1 for k in s.superposition):
            raise ConfigError("bump.superposition", "bump counts must be positive")
    elif b is Benchmark.FUNCS:
        if cfg.funcs.n_outer < 1:
            raise ConfigError("funcs.n_outer", "must be >= 1")
        if cfg.funcs.n_train < n.widths[0] and n.init is Init.EXEMPLAR:
            raise ConfigError("funcs.n_train", "exemplar init needs at least widths[0] samples")
    else:
        nb = cfg.nbody
        if nb.layout not in ("force_channels", "kinematic"):
            raise ConfigError("nbody.layout", "must be force_channels or kinematic")
        if any(v not in (3, 4, 5) for v in nb.n_values):
            raise ConfigError("nbody.n_values", "body counts must be 3, 4 or 5")
        if nb.rollout_initial_conditions < 0 or nb.rollout_steps < 1:
            raise ConfigError("nbody.rollout_steps", "must be positive")
        if nb.label_weight <= 0:
            raise ConfigError("nbody.label_weight", "must be positive")
