"""Experiment loops for the three benchmarks, their metrics and baselines.

Each benchmark has a ``train_*`` step producing a :class:`TrainedModel` and an
``evaluate_*`` step that is a pure function of (config, seed, model), so an
evaluation run from a checkpoint reproduces the numbers of the training run.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy import stats

from .bench import bump as bb
from .bench import nbody as nb
from .bench import signals as sg
from .config import Benchmark, ExperimentConfig, Init, NetworkSpec
from .core import Activation, LayerParams, unit_columns
from .inference import (
    BatchSettleResult,
    MaskError,
    NetworkParams,
    SettleConfig,
    make_mask,
    masked_settle_batch,
    restrict_rows,
    settle_batch,
)
from .learning import EpochMetrics, OptimizerState, init_states, train_epoch
from .rng import derive_int, stream

log = logging.getLogger(__name__)


# -- statistics ----------------------------------------------------------------


def student_t_ci(values: Sequence[float], level: float = 0.95):
    """Two-sided Student-t interval for the mean; ``None`` below three values."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 3:
        return None
    half = stats.t.ppf(0.5 + level / 2.0, v.size - 1) * v.std(ddof=1) / math.sqrt(v.size)
    m = float(v.mean())
    return [m - float(half), m + float(half)]


def summarize(values: Sequence[Optional[float]]) -> Dict:
    vals = [float(x) for x in values if x is not None]
    if not vals:
        return {"mean": None, "ci95": None, "per_seed": list(values), "n": 0}
    return {"mean": float(np.mean(vals)), "ci95": student_t_ci(vals),
            "per_seed": [None if x is None else float(x) for x in values], "n": len(vals)}


# -- report ----------------------------------------------------------------------


@dataclass
class MetricsReport:
    """Aggregated metrics; serialises deterministically (no clocks, sorted keys)."""

    benchmark: str
    seeds: List[int]
    splits: Dict = field(default_factory=dict)
    ratios: Dict = field(default_factory=dict)
    masked: Dict = field(default_factory=dict)
    baselines: Dict = field(default_factory=dict)
    conditions: Dict = field(default_factory=dict)
    sparsity: Dict = field(default_factory=dict)
    drift: Dict = field(default_factory=dict)
    error_map: Optional[List[List[float]]] = None
    training: Dict = field(default_factory=dict)
    extra: Dict = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1, allow_nan=True)

    @classmethod
    def from_dict(cls, d: Dict) -> "MetricsReport":
        return cls(**d)

    # flat tables --------------------------------------------------------------

    def split_table(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["split", "mean_mse", "ci95_low", "ci95_high", "n_seeds"])
        for name in sorted(self.splits):
            s = self.splits[name]
            lo, hi = s["ci95"] if s["ci95"] else ("", "")
            w.writerow([name, _fmt(s["mean"]), _fmt(lo), _fmt(hi), s["n"]])
        return buf.getvalue()

    def mask_table(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "regime", "difficulty", "hidden_mse", "observed_mse"])
        for diff in sorted(self.masked):
            for regime in sorted(self.masked[diff]):
                for model, s in sorted(self.masked[diff][regime].items()):
                    w.writerow([model, regime, diff, _fmt(s["hidden"]["mean"]),
                                _fmt(s["observed"]["mean"])])
        return buf.getvalue()

    def drift_table(self, condition: str) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "position_mse"])
        for step, mse in enumerate(self.drift[condition]["mse"]):
            w.writerow([step, _fmt(mse)])
        return buf.getvalue()

    def error_map_table(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        for row in self.error_map or []:
            w.writerow([_fmt(x) for x in row])
        return buf.getvalue()

    def write(self, out_dir: str, name: str = "metrics") -> Dict[str, str]:
        os.makedirs(out_dir, exist_ok=True)
        files = {"report": os.path.join(out_dir, f"{name}.json")}
        with open(files["report"], "w") as fh:
            fh.write(self.to_json())
        tables = {"splits": self.split_table()}
        if self.masked:
            tables["mask_grid"] = self.mask_table()
        if self.error_map:
            tables["error_map"] = self.error_map_table()
        for cond in self.drift:
            tables["drift_" + cond.replace("/", "_").replace("+", "-")] = self.drift_table(cond)
        for key, text in tables.items():
            path = os.path.join(out_dir, f"{name}_{key}.csv")
            with open(path, "w") as fh:
                fh.write(text)
            files[key] = path
        return files


def _fmt(x) -> str:
    if x is None or x == "":
        return ""
    return repr(float(x))


# -- sparsity -------------------------------------------------------------------


def k95(S: np.ndarray, x: np.ndarray, g: np.ndarray, frac: float = 0.95) -> int:
    """Smallest magnitude-ordered atom prefix reaching ``frac`` of the full code's
    explained variance ‖x‖² − ‖x − Sg‖². Zero codes (or codes explaining
    nothing) give 0."""
    support = np.flatnonzero(g)
    if support.size == 0:
        return 0
    base = float(x @ x)
    full = base - float(np.sum((x - S @ g) ** 2))
    if full <= 0:
        return 0
    order = support[np.argsort(-np.abs(g[support]), kind="stable")]
    partial = np.zeros_like(x)
    for n, i in enumerate(order, start=1):
        partial = partial + S[:, i] * g[i]
        if base - float(np.sum((x - partial) ** 2)) >= frac * full:
            return n
    return int(order.size)


def sparsity_stats(net: NetworkParams, res: BatchSettleResult) -> List[Dict[str, float]]:
    """Per-layer k_eff (mean ‖g‖₀) and k_95 (mean over samples)."""
    if res.batch_size == 0:
        raise ValueError("no settled samples")
    out = []
    for l, p in enumerate(net.layers):
        G, X = res.codes[l], res.inputs[l]
        keff = float(np.mean(np.count_nonzero(G, axis=1)))
        k = float(np.mean([k95(p.S, X[i], G[i]) for i in range(G.shape[0])]))
        out.append({"k_eff": keff, "k_95": k})
    return out


def _sparsity_summary(per_seed: List[List[Dict[str, float]]]) -> Dict:
    out = {}
    for l in range(len(per_seed[0])):
        out[f"layer{l}"] = {k: summarize([s[l][k] for s in per_seed]) for k in ("k_eff", "k_95")}
    return out


# -- network construction and training --------------------------------------------


def layer_lambdas(spec: NetworkSpec) -> List[float]:
    return [spec.lam * spec.lam_ratio**l for l in range(len(spec.widths))]


def build_network(spec: NetworkSpec, d_in: int, rng: np.random.Generator,
                  bottom: Optional[np.ndarray] = None) -> NetworkParams:
    """Unit-column dictionaries; ``bottom`` (d_in x K0) seeds the first S."""
    lams = layer_lambdas(spec)
    dims_in = [d_in] + list(spec.interfaces)
    layers = []
    for l, K in enumerate(spec.widths):
        if l == 0 and bottom is not None:
            S = unit_columns(np.asarray(bottom, dtype=np.float64))
        else:
            S = unit_columns(rng.standard_normal((dims_in[l], K)))
        U = None
        if l < len(spec.widths) - 1:
            U = unit_columns(rng.standard_normal((spec.interfaces[l], K)))
        layers.append(LayerParams(S, U, lam=lams[l], beta_td=spec.beta_td, k_top=spec.k_top[l],
                                  activation=Activation(spec.activation)))
    return NetworkParams(layers)


def exemplar_columns(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    replace = X.shape[0] < K
    idx = rng.choice(X.shape[0], size=K, replace=replace)
    cols = X[idx].T.copy()
    if replace:
        cols += 1e-3 * rng.standard_normal(cols.shape)
    return cols


@dataclass
class TrainedModel:
    net: NetworkParams
    states: List[OptimizerState]
    preprocessing: Dict = field(default_factory=dict)
    history: List[Dict] = field(default_factory=list)


def fit(net: NetworkParams, X: np.ndarray, cfg: ExperimentConfig, rng: np.random.Generator,
        states: Optional[List[OptimizerState]] = None, epochs: Optional[int] = None):
    states = init_states(net) if states is None else states
    history = []
    for ep in range(cfg.epochs if epochs is None else epochs):
        m: EpochMetrics = train_epoch(net, X, cfg.settle, cfg.trainer, states, rng)
        history.append(m.as_dict())
        log.info("epoch %d: mse %.3e energy %.3e", ep, m.mse, m.energy)
    return states, history


class JointPredictor:
    """Reads label rows off a network trained on [inputs; labels] vectors.

    Prediction settles the network restricted to the input rows, which
    minimises the energy with the label rows masked out, and returns the
    label rows of the bottom reconstruction.
    """

    def __init__(self, net: NetworkParams, n_in: int, cfg: SettleConfig):
        self.net = net
        self.n_in = n_in
        self.cfg = cfg
        self.sub = restrict_rows(net, np.arange(n_in))

    def settle(self, X: np.ndarray) -> BatchSettleResult:
        return settle_batch(self.sub, X, self.cfg)

    def predict(self, X: np.ndarray, return_result: bool = False):
        res = self.settle(X)
        out = res.codes[0] @ self.net.layers[0].S[self.n_in:].T
        return (out, res) if return_result else out


# -- bump decoding ---------------------------------------------------------------------


def bump_task(cfg: ExperimentConfig) -> bb.BumpTaskConfig:
    s = cfg.bump
    hold = bb.Holdout(kind=bb.HoldoutKind(s.holdout), half_side=s.holdout_half_side,
                      r_in=s.annulus[0], r_out=s.annulus[1])
    return bb.BumpTaskConfig(grid_n=s.grid_n, sigma=s.sigma, holdout=hold,
                             encoding=bb.Encoding(s.encoding))


def bump_vectors(task: bb.BumpTaskConfig, centers: np.ndarray) -> np.ndarray:
    """[encoding ; x profile ; y profile] per centre."""
    enc = bb.encode_position(task, centers[:, 0], centers[:, 1])
    return np.hstack([enc, bb.axis_profile(task, centers[:, 0]), bb.axis_profile(task, centers[:, 1])])


def _axis_atoms(task: bb.BumpTaskConfig, X: np.ndarray, K: int, rng) -> np.ndarray:
    """Exemplar atoms restricted to one axis: x-half or y-half of a sample."""
    E = task.axis_encoding_dim
    N = task.grid_n
    x_rows = np.r_[0:E, 2 * E:2 * E + N]
    y_rows = np.r_[E:2 * E, 2 * E + N:2 * E + 2 * N]
    cols = np.zeros((X.shape[1], K))
    idx = rng.choice(X.shape[0], size=K, replace=X.shape[0] < K)
    half = K // 2
    cols[x_rows, :half] = X[idx[:half]][:, x_rows].T
    cols[y_rows, half:] = X[idx[half:]][:, y_rows].T
    return cols


def train_bump(cfg: ExperimentConfig, seed: int) -> TrainedModel:
    task = bump_task(cfg)
    rng = stream(seed, "bump", "train-data")
    centers = bb.sample_centers(task, cfg.bump.n_train, rng, in_holdout=False)
    X = bump_vectors(task, centers)
    init_rng = stream(seed, "bump", "init")
    K = cfg.network.widths[0]
    if cfg.network.init is Init.AXIS:
        bottom = _axis_atoms(task, X, K, init_rng)
    elif cfg.network.init is Init.EXEMPLAR:
        bottom = exemplar_columns(X, K, init_rng)
    else:
        bottom = None
    net = build_network(cfg.network, X.shape[1], init_rng, bottom)
    states, history = fit(net, X, cfg, stream(seed, "bump", "epochs"))
    return TrainedModel(net, states, {"n_in": task.encoding_dim}, history)


def _bump_decode(pred: JointPredictor, task: bb.BumpTaskConfig, centers_per_image) -> np.ndarray:
    """Images from per-bump codes: Σ_b outer(y-profile_b, x-profile_b)."""
    flat = np.concatenate([np.asarray(c).reshape(-1, 2) for c in centers_per_image])
    enc = bb.encode_position(task, flat[:, 0], flat[:, 1]).reshape(-1, task.encoding_dim)
    prof = pred.predict(enc)
    N = task.grid_n
    imgs = np.einsum("bi,bj->bij", prof[:, N:], prof[:, :N]).reshape(-1, N * N)
    out, pos = [], 0
    for c in centers_per_image:
        n = np.asarray(c).reshape(-1, 2).shape[0]
        out.append(imgs[pos:pos + n].sum(axis=0))
        pos += n
    return np.array(out)


def _bump_mse(pred, task, centers_per_image) -> float:
    P = _bump_decode(pred, task, centers_per_image)
    T = np.array([bb.bump_image(task, c) for c in centers_per_image])
    return float(np.mean((P - T) ** 2))


def evaluate_bump(cfg: ExperimentConfig, seed: int, model: TrainedModel) -> Dict:
    task = bump_task(cfg)
    pred = JointPredictor(model.net, task.encoding_dim, cfg.eval_settle)
    rng = stream(seed, "bump", "eval")
    n = cfg.bump.n_test
    out: Dict = {}
    id_c = bb.sample_centers(task, n, rng, in_holdout=False)
    out["id"] = _bump_mse(pred, task, list(id_c[:, None, :]))
    empty_holdout = task.holdout.kind is bb.HoldoutKind.NONE
    if empty_holdout:
        out["ood"], out["ratio"] = None, None
        ood_c = None
    else:
        ood_c = bb.sample_centers(task, n, rng, in_holdout=True)
        out["ood"] = _bump_mse(pred, task, list(ood_c[:, None, :]))
        out["ratio"] = out["ood"] / out["id"] if out["id"] > 0 else None
    for N in cfg.bump.superposition:
        m = cfg.bump.n_superposition
        # one bump from the holdout, the rest from the training region
        if ood_c is None:
            sets = [rng.uniform(0, task.grid_n - 1, size=(N, 2)) for _ in range(m)]
        else:
            first = bb.sample_centers(task, m, rng, in_holdout=True)
            rest = bb.sample_centers(task, m * (N - 1), rng, in_holdout=False).reshape(m, N - 1, 2)
            sets = [np.vstack([first[i:i + 1], rest[i]]) for i in range(m)]
        out[f"n{N}"] = _bump_mse(pred, task, sets)
        # same images decoded from the single summed encoding (pairing is lost)
        enc = np.array([bb.encode_position(task, s[:, 0], s[:, 1]).sum(axis=0) for s in sets])
        prof = pred.predict(enc)
        G = task.grid_n
        P = np.einsum("bi,bj->bij", prof[:, G:], prof[:, :G]).reshape(m, -1)
        T = np.array([bb.bump_image(task, s) for s in sets])
        out[f"n{N}_summed_input"] = float(np.mean((P - T) ** 2))
    _, res = pred.predict(bb.encode_position(task, id_c[:, 0], id_c[:, 1]), return_result=True)
    out["sparsity"] = sparsity_stats(pred.sub, res)
    if cfg.bump.error_map:
        G = task.grid_n
        grid = np.array([(x, y) for y in range(G) for x in range(G)], dtype=float)
        P = _bump_decode(pred, task, list(grid[:, None, :]))
        T = np.array([bb.bump_image(task, c) for c in grid[:, None, :]])
        out["error_map"] = np.mean((P - T) ** 2, axis=1).reshape(G, G).tolist()
    return out


# -- function composition ------------------------------------------------------------------


DIFFICULTIES = ("id", "easy_ood", "hard_ood")


def funcs_data(cfg: ExperimentConfig, seed: int, split: str, difficulty: str) -> np.ndarray:
    n = cfg.funcs.n_train if split == "train" else cfg.funcs.n_test
    return sg.signal_matrix(n, difficulty, derive_int(seed, "funcs", split, difficulty), cfg.funcs.length)


def train_funcs(cfg: ExperimentConfig, seed: int) -> TrainedModel:
    X = funcs_data(cfg, seed, "train", "id")
    init_rng = stream(seed, "funcs", "init")
    bottom = exemplar_columns(X, cfg.network.widths[0], init_rng) if cfg.network.init is Init.EXEMPLAR else None
    net = build_network(cfg.network, X.shape[1], init_rng, bottom)
    states, history = fit(net, X, cfg, stream(seed, "funcs", "epochs"))
    return TrainedModel(net, states, {"dataset_mean": X.mean(axis=0).tolist()}, history)


@dataclass
class Baseline:
    """Non-VN predictor for hidden positions: ``zero_fill`` or ``dataset_mean``."""

    kind: str
    mean: Optional[np.ndarray] = None

    def fill(self, X_obs: np.ndarray, hidden: np.ndarray) -> np.ndarray:
        if self.kind == "zero_fill":
            return np.where(hidden, 0.0, X_obs)
        if self.kind == "dataset_mean":
            return np.where(hidden, self.mean, X_obs)
        raise ValueError(f"unknown baseline {self.kind!r}")


def evaluate_masked(model, samples: np.ndarray, regimes: Sequence, cfg: Optional[SettleConfig] = None,
                    n_outer: int = 5, seed: int = 0) -> Dict[str, Dict]:
    """Hidden- and observed-position MSE per mask regime.

    ``model`` is a :class:`NetworkParams` (masked imputation loop) or a
    :class:`Baseline` (hidden positions filled directly). A regime may also be
    a :class:`MaskSpec`; a mask hiding nothing reports ``applicable=False``.
    """
    from .inference import MaskSpec

    X = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    out = {}
    for regime in regimes:
        spec = regime if isinstance(regime, MaskSpec) else make_mask(regime, X.shape[1], seed)
        name = spec.regime.value if not isinstance(regime, str) else regime
        hidden = spec.hidden
        X_obs = X * spec.mask
        if isinstance(model, NetworkParams):
            X_hat = masked_settle_batch(model, X_obs, spec, cfg or SettleConfig(), n_outer).x_hat
        else:
            X_hat = model.fill(X_obs, hidden)
        if not hidden.any():
            # same expression as the unmasked reconstruction metric, bit for bit
            out[name] = {"applicable": False, "hidden": None, "observed": float(np.mean((X_hat - X) ** 2))}
            continue
        obs = float(np.mean((X_hat[:, ~hidden] - X[:, ~hidden]) ** 2))
        out[name] = {"applicable": True,
                     "hidden": float(np.mean((X_hat[:, hidden] - X[:, hidden]) ** 2)),
                     "observed": obs}
    return out


def evaluate_funcs(cfg: ExperimentConfig, seed: int, model: TrainedModel, masked: bool = True) -> Dict:
    net = model.net
    out: Dict = {}
    first = None
    for diff in DIFFICULTIES:
        X = funcs_data(cfg, seed, "test", diff)
        res = settle_batch(net, X, cfg.eval_settle)
        out[diff] = float(np.mean((res.codes[0] @ net.layers[0].S.T - X) ** 2))
        if first is None:
            first = res
    out["sparsity"] = sparsity_stats(net, first)
    if masked:
        mean = np.asarray(model.preprocessing["dataset_mean"])
        models = {"vn": net, "zero_fill": Baseline("zero_fill"), "dataset_mean": Baseline("dataset_mean", mean)}
        grid: Dict = {}
        for diff in DIFFICULTIES:
            X = funcs_data(cfg, seed, "test", diff)
            grid[diff] = {}
            for name, m in models.items():
                res = evaluate_masked(m, X, cfg.funcs.regimes, cfg.eval_settle, cfg.funcs.n_outer,
                                      seed=derive_int(seed, "funcs", "mask"))
                for regime, r in res.items():
                    grid[diff].setdefault(regime, {})[name] = r
        out["masked"] = grid
    return out


# -- n-body ---------------------------------------------------------------------------------


def parse_condition(name: str) -> nb.Condition:
    forces, _, n = name.partition("/n")
    if not n:
        raise ValueError(f"condition {name!r} must look like 'gravity+drag/n5'")
    return nb.Condition(nb._forces(forces.split("+")), int(n))


def _nbody_set(cfg: ExperimentConfig, seed: int, cond: nb.Condition, split: str) -> nb.NBodyData:
    n_sims = cfg.nbody.train_sims if split == "train" else cfg.nbody.test_sims
    base = derive_int(seed, "nbody", split, cond.name)
    return nb.generate_nbody_dataset(range(base, base + n_sims), cond.forces, cond.n_bodies,
                                     cfg.nbody.horizon, cfg.nbody.stride,
                                     layout=nb.FeatureLayout(cfg.nbody.layout))


class NBodyPredictor:
    def __init__(self, model: TrainedModel, cfg: ExperimentConfig):
        pp = model.preprocessing
        self.fs = np.asarray(pp["feature_scale"])
        self.ls = np.asarray(pp["label_scale"])
        self.w = float(pp["label_weight"])
        self.layout = nb.FeatureLayout(pp.get("layout", "force_channels"))
        self.joint = JointPredictor(model.net, nb.N_FEATURES, cfg.eval_settle)

    def __call__(self, F: np.ndarray) -> np.ndarray:
        return self.joint.predict(F / self.fs) / self.w * self.ls


def _train_joint(cfg: ExperimentConfig, data: nb.NBodyData, rng_init, rng_epochs) -> TrainedModel:
    fs = np.sqrt(np.mean(data.features**2, axis=0))
    fs[fs == 0] = 1.0
    ls = np.sqrt(np.mean(data.targets**2, axis=0))
    ls[ls == 0] = 1.0
    w = cfg.nbody.label_weight
    X = np.hstack([data.features / fs, w * data.targets / ls])
    bottom = exemplar_columns(X, cfg.network.widths[0], rng_init) if cfg.network.init is Init.EXEMPLAR else None
    net = build_network(cfg.network, X.shape[1], rng_init, bottom)
    states, history = fit(net, X, cfg, rng_epochs)
    pp = {"feature_scale": fs.tolist(), "label_scale": ls.tolist(), "label_weight": w,
          "layout": cfg.nbody.layout, "target_mean": data.targets.mean(axis=0).tolist()}
    return TrainedModel(net, states, pp, history)


def train_nbody(cfg: ExperimentConfig, seed: int, forces: Optional[Sequence[nb.Force]] = None) -> TrainedModel:
    """Train on single-force systems with five bodies (or only ``forces``)."""
    conds = nb.id_conditions() if forces is None else [nb.Condition((nb.Force(f),), 5) for f in forces]
    data = nb.concat([_nbody_set(cfg, seed, c, "train") for c in conds])
    tag = "all" if forces is None else "+".join(nb.Force(f).value for f in forces)
    return _train_joint(cfg, data, stream(seed, "nbody", "init", tag), stream(seed, "nbody", "epochs", tag))


def model_accel_fn(predict: Callable, forces, layout) -> Callable:
    """Acceleration from a feature-space predictor, batched over leading axes."""

    def accel(x, v):
        lead = x.shape[:-2]
        xs = x.reshape((-1,) + x.shape[-2:])
        vs = v.reshape(xs.shape)
        F = np.concatenate([nb.features(a, b, forces, layout) for a, b in zip(xs, vs)])
        return predict(F).reshape(x.shape)

    return accel


def rollout(cfg: ExperimentConfig, predict: Callable, cond: nb.Condition, seed: int,
            n_initial: int, steps: int) -> Dict:
    """Open-loop rollouts from ``n_initial`` true initial states.

    The model's acceleration drives every RK4 stage; the same soft boundary as
    the simulator is applied after each step. Returns per-step position MSE
    averaged over initial conditions (and each condition's curve).
    """
    sim = nb.SimConfig(forces=cond.forces)
    rng = stream(seed, "nbody", "rollout", cond.name)
    states = [nb.initial_state(cond.n_bodies, rng, sim.box) for _ in range(n_initial)]
    true = np.stack([nb.simulate(sim, s, steps).positions for s in states], axis=1)
    x = np.stack([s.positions for s in states])
    v = np.stack([s.velocities for s in states])
    accel = model_accel_fn(predict, cond.forces, nb.FeatureLayout(cfg.nbody.layout))
    model = np.empty_like(true)
    model[0] = x
    for t in range(steps):
        x, v = nb.rk4_integrate(x, v, sim.dt, accel)
        x, v = nb.soft_boundary(sim, x, v)
        model[t + 1] = x
    per_ic = np.mean((model - true) ** 2, axis=(2, 3))  # (steps + 1, n_initial)
    return {"mse": per_ic.mean(axis=1).tolist(), "per_initial_condition": per_ic.T.tolist()}


def evaluate_nbody(cfg: ExperimentConfig, seed: int, model: TrainedModel, rollouts: bool = True) -> Dict:
    predict = NBodyPredictor(model, cfg)
    mean = np.asarray(model.preprocessing["target_mean"])
    id_conds = nb.id_conditions()
    ood_conds = nb.ood_conditions(cfg.nbody.n_values)
    overlap = {c.name for c in id_conds} & {c.name for c in ood_conds}
    if overlap:
        raise ValueError(f"ID and OOD conditions overlap: {sorted(overlap)}")
    out: Dict = {"conditions": {}}
    pooled = {"id": [], "ood": []}
    for split, conds in (("id", id_conds), ("ood", ood_conds)):
        for c in conds:
            d = _nbody_set(cfg, seed, c, "test")
            P = predict(d.features)
            vn = float(np.mean((P - d.targets) ** 2))
            base = float(np.mean((mean - d.targets) ** 2))
            out["conditions"][c.name] = {"split": split, "vn": vn, "mean_predictor": base}
            pooled[split].append((vn, base, d.targets.shape[0]))
    for split, rows in pooled.items():
        n = sum(r[2] for r in rows)
        out[split] = sum(r[0] * r[2] for r in rows) / n
        out[f"{split}_mean_predictor"] = sum(r[1] * r[2] for r in rows) / n
    d = _nbody_set(cfg, seed, id_conds[0], "test")
    _, res = predict.joint.predict(d.features / predict.fs, return_result=True)
    out["sparsity"] = sparsity_stats(predict.joint.sub, res)
    if rollouts and cfg.nbody.rollout_initial_conditions > 0:
        out["drift"] = {}
        for name in cfg.nbody.rollout_conditions:
            cond = parse_condition(name)
            out["drift"][cond.name] = rollout(cfg, predict, cond, seed,
                                              cfg.nbody.rollout_initial_conditions,
                                              cfg.nbody.rollout_steps)
    return out


def drag_only_probe(cfg: ExperimentConfig, seed: int) -> float:
    """Single-step MSE of a VN trained and tested on drag-only systems."""
    model = train_nbody(cfg, seed, forces=[nb.Force.DRAG])
    predict = NBodyPredictor(model, cfg)
    d = _nbody_set(cfg, seed, nb.Condition((nb.Force.DRAG,), 5), "test")
    return float(np.mean((predict(d.features) - d.targets) ** 2))


# -- drivers -----------------------------------------------------------------------------------


TRAIN = {Benchmark.BUMP: train_bump, Benchmark.FUNCS: train_funcs, Benchmark.NBODY: train_nbody}


def evaluate(cfg: ExperimentConfig, seed: int, model: TrainedModel, masked: bool = True,
             rollouts: bool = True, first_seed: bool = True) -> Dict:
    b = cfg.benchmark
    if b is Benchmark.BUMP:
        return evaluate_bump(cfg, seed, model)
    if b is Benchmark.FUNCS:
        return evaluate_funcs(cfg, seed, model, masked=masked)
    out = evaluate_nbody(cfg, seed, model, rollouts=rollouts and first_seed)
    if cfg.nbody.drag_only_probe:
        out["drag_only"] = drag_only_probe(cfg, seed)
    return out


def aggregate(cfg: ExperimentConfig, seeds: List[int], per_seed: List[Dict],
              histories: Optional[List[List[Dict]]] = None) -> MetricsReport:
    rep = MetricsReport(benchmark=cfg.benchmark.value, seeds=list(seeds))
    b = cfg.benchmark
    col = lambda key: [r.get(key) for r in per_seed]  # noqa: E731
    rep.sparsity = _sparsity_summary([r["sparsity"] for r in per_seed])
    if b is Benchmark.BUMP:
        rep.splits["id"] = summarize(col("id"))
        rep.splits["ood"] = summarize(col("ood"))
        rep.ratios["ood_id"] = summarize(col("ratio"))
        for N in cfg.bump.superposition:
            rep.splits[f"superposition_n{N}"] = summarize(col(f"n{N}"))
            rep.extra[f"superposition_n{N}_summed_input"] = summarize(col(f"n{N}_summed_input"))
        if per_seed[0].get("error_map") is not None:
            rep.error_map = np.mean([r["error_map"] for r in per_seed], axis=0).tolist()
    elif b is Benchmark.FUNCS:
        for diff in DIFFICULTIES:
            rep.splits[diff] = summarize(col(diff))
        rep.ratios["hard_id"] = summarize([r["hard_ood"] / r["id"] for r in per_seed])
        if "masked" in per_seed[0]:
            grid = per_seed[0]["masked"]
            for diff in grid:
                rep.masked[diff] = {}
                for regime in grid[diff]:
                    rep.masked[diff][regime] = {}
                    for model in grid[diff][regime]:
                        cells = [r["masked"][diff][regime][model] for r in per_seed]
                        rep.masked[diff][regime][model] = {
                            "applicable": cells[0]["applicable"],
                            "hidden": summarize([c["hidden"] for c in cells]),
                            "observed": summarize([c["observed"] for c in cells]),
                        }
    else:
        rep.splits["id"] = summarize(col("id"))
        rep.splits["ood"] = summarize(col("ood"))
        rep.baselines["id_mean_predictor"] = summarize(col("id_mean_predictor"))
        rep.baselines["ood_mean_predictor"] = summarize(col("ood_mean_predictor"))
        rep.ratios["ood_id"] = summarize([r["ood"] / r["id"] if r["id"] > 0 else None for r in per_seed])
        for name in per_seed[0]["conditions"]:
            cells = [r["conditions"][name] for r in per_seed]
            rep.conditions[name] = {"split": cells[0]["split"],
                                    "vn": summarize([c["vn"] for c in cells]),
                                    "mean_predictor": summarize([c["mean_predictor"] for c in cells])}
        if "drag_only" in per_seed[0]:
            rep.splits["drag_only"] = summarize(col("drag_only"))
        rep.drift = per_seed[0].get("drift", {})
    if histories is not None:
        rep.training = {str(s): h for s, h in zip(seeds, histories)}
    return rep


@dataclass
class ExperimentRun:
    report: MetricsReport
    models: List[TrainedModel]
    per_seed: List[Dict]


def run(cfg: ExperimentConfig, masked: bool = True, rollouts: bool = True) -> ExperimentRun:
    seeds = cfg.seeds()
    models, per_seed = [], []
    for i, s in enumerate(seeds):
        m = TRAIN[cfg.benchmark](cfg, s)
        models.append(m)
        per_seed.append(evaluate(cfg, s, m, masked=masked, rollouts=rollouts, first_seed=i == 0))
    rep = aggregate(cfg, seeds, per_seed, [m.history for m in models])
    return ExperimentRun(rep, models, per_seed)


def run_bump(cfg: ExperimentConfig) -> MetricsReport:
    return run(cfg).report


def run_funcs(cfg: ExperimentConfig) -> MetricsReport:
    return run(cfg).report


def run_nbody(cfg: ExperimentConfig) -> MetricsReport:
    return run(cfg).report
