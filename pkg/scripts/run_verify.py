"""Run every property suite at its full instance size and write verify.json."""
import argparse
import sys

from vecnet.cli import main

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("suites", nargs="*", default=["all"])
    ap.add_argument("--out", default="runs/verify")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    sys.exit(main(["verify", *args.suites, "--out", args.out, "--seed", str(args.seed)]))
