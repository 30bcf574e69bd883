"""Run the nbody benchmark at its default configuration (or --config) and write
metrics.json, CSV tables, checkpoints and a manifest to --out."""
import argparse
import sys

from vecnet.cli import main

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/nbody")
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--threads", type=int)
    args = ap.parse_args()
    argv = ["-v", "bench", "nbody", "--out", args.out]
    for flag in ("config", "seed", "threads"):
        if getattr(args, flag) is not None:
            argv += [f"--{flag}", str(getattr(args, flag))]
    sys.exit(main(argv))
