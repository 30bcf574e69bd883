"""Command-line entry point: ``vn train | eval | bench | verify | export-config``.

Exit codes: 0 success, 1 a verification suite failed, 2 configuration or
usage error, 3 runtime failure, 4 unreadable or unsupported checkpoint.
"""
from __future__ import annotations

import argparse
import contextlib
import datetime as _dt
import json
import logging
import os
import subprocess
import sys
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

from . import __version__
from . import checkpoint as ckpt
from . import config as C
from . import harness as H

log = logging.getLogger("vecnet")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECKPOINT = 0, 1, 2, 3, 4
MANIFEST = "manifest.json"


class UsageError(Exception):
    """Flags that are individually valid but do not fit the command."""


@dataclass
class RunManifest:
    command: str
    config: Optional[Dict]
    seed: Optional[int]
    version: str
    started: str
    finished: str = ""
    outputs: Dict[str, str] = field(default_factory=dict)

    def write(self, out_dir: str) -> str:
        path = os.path.join(out_dir, MANIFEST)
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=1, sort_keys=True)
        return path


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _threads(n: Optional[int]):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _resolve_config(args, benchmark: Optional[str] = None) -> C.ExperimentConfig:
    if args.config:
        cfg = C.load(args.config)
        if benchmark is not None and cfg.benchmark.value != benchmark:
            raise C.ConfigError("benchmark", f"config is for {cfg.benchmark.value!r}, command asks for {benchmark!r}")
    else:
        if benchmark is None:
            raise UsageError("--config is required")
        cfg = C.from_dict({"benchmark": benchmark})
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def checkpoint_name(seed: int) -> str:
    return f"checkpoint_seed{seed}.vnck"


def _train(cfg: C.ExperimentConfig, out_dir: str, command: str) -> int:
    os.makedirs(out_dir, exist_ok=True)
    manifest = RunManifest(command, C.to_dict(cfg), cfg.seed, version_string(), _now())
    run = H.run(cfg)
    run.report.extra["manifest"] = MANIFEST
    for i, (s, m) in enumerate(zip(cfg.seeds(), run.models)):
        extras = {"config": C.to_dict(cfg), "seed": s, "seed_index": i, "manifest": MANIFEST,
                  "preprocessing": m.preprocessing, "history": m.history}
        path = os.path.join(out_dir, checkpoint_name(s))
        ckpt.save(path, ckpt.Checkpoint(m.net, m.states, extras))
        manifest.outputs[f"checkpoint_seed{s}"] = path
    manifest.outputs.update(run.report.write(out_dir))
    manifest.finished = _now()
    manifest.write(out_dir)
    _summary(run.report)
    return EXIT_OK


def _summary(rep: H.MetricsReport) -> None:
    for name, s in sorted(rep.splits.items()):
        if s["mean"] is not None:
            print(f"{name:>24s}  mse {s['mean']:.4e}")
    for name, s in sorted(rep.ratios.items()):
        print(f"{name:>24s}  ratio {'n/a' if s['mean'] is None else format(s['mean'], '.4f')}")


def cmd_train(args) -> int:
    return _train(_resolve_config(args), args.out, "train")


def cmd_bench(args) -> int:
    return _train(_resolve_config(args, args.benchmark), args.out, f"bench {args.benchmark}")


def cmd_eval(args) -> int:
    ck = ckpt.load(args.checkpoint)
    if "config" not in ck.extras or "seed" not in ck.extras:
        raise ckpt.CheckpointError("checkpoint carries no run configuration", 0)
    cfg = C.load(args.config) if args.config else C.from_dict(ck.extras["config"], environ={})
    if args.masked and cfg.benchmark is not C.Benchmark.FUNCS:
        raise UsageError("--masked needs a funcs checkpoint/config")
    if args.rollout and cfg.benchmark is not C.Benchmark.NBODY:
        raise UsageError("--rollout needs an nbody checkpoint/config")
    seed = int(ck.extras["seed"])
    model = H.TrainedModel(ck.net, ck.states or [], ck.extras.get("preprocessing", {}),
                           ck.extras.get("history", []))
    manifest = RunManifest("eval", C.to_dict(cfg), seed, version_string(), _now())
    cfg.nbody.drag_only_probe = False  # the probe trains its own model
    per_seed = H.evaluate(cfg, seed, model, masked=args.masked, rollouts=args.rollout)
    rep = H.aggregate(cfg, [seed], [per_seed])
    rep.extra["manifest"] = MANIFEST
    rep.extra["checkpoint"] = os.path.basename(args.checkpoint)
    os.makedirs(args.out, exist_ok=True)
    manifest.outputs.update(rep.write(args.out, name="eval"))
    manifest.finished = _now()
    manifest.write(args.out)
    _summary(rep)
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import SUITES, run_suites

    names = args.suite or ["all"]
    bad = [n for n in names if n != "all" and n not in SUITES]
    if bad:
        raise UsageError(f"unknown suite {bad[0]!r}; choose from {', '.join(['all', *SUITES])}")
    seed = 0 if args.seed is None else args.seed
    report = run_suites(names, seed=seed)
    for name, r in report["suites"].items():
        print(f"{name:>14s}  {'PASS' if r['passed'] else 'FAIL'}  {json.dumps(r['stats'])}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "verify.json"), "w") as fh:
            json.dump(report, fh, indent=1, sort_keys=True)
    return EXIT_OK if report["passed"] else EXIT_FAILED


def cmd_export_config(args) -> int:
    text = C.dump_yaml(C.default_config(args.benchmark))
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vn", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--seed", type=int, help="override the configured base seed")
        p.add_argument("--threads", type=int, help="BLAS thread limit")

    p = sub.add_parser("train", help="train and evaluate the configured benchmark")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    common(p)
    p.add_argument("--masked", action="store_true", help="masked-prediction grid (funcs)")
    p.add_argument("--rollout", action="store_true", help="open-loop rollouts (nbody)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="run a benchmark with its default configuration")
    p.add_argument("benchmark", choices=[b.value for b in C.Benchmark])
    common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("verify", help="run property suites")
    p.add_argument("suite", nargs="*", help="suite names or 'all'")
    common(p, out_required=False)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("export-config", help="print the full default configuration")
    p.add_argument("benchmark", nargs="?", default="bump", choices=[b.value for b in C.Benchmark])
    p.add_argument("--out", help="write to this file instead of stdout")
    p.set_defaults(func=cmd_export_config, threads=None)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _threads(getattr(args, "threads", None)):
            return args.func(args)
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ckpt.CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except OSError as exc:
        if getattr(args, "command", None) == "eval" and exc.filename == getattr(args, "checkpoint", None):
            print(f"checkpoint error: {exc}", file=sys.stderr)
            return EXIT_CHECKPOINT
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
