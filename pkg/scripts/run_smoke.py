#!/usr/bin/env python3
"""End-to-end smoke experiment: generate a paired dataset, train with the
default desk configuration, translate a few samples, and emit the metrics
report. Mirrors the training acceptance experiment.

Usage: python scripts/run_smoke.py [--out DIR] [--n 200] [--iterations 2000]
"""

import argparse
import sys
from pathlib import Path

from posagan.cli import main as cli


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/smoke")
    ap.add_argument("--n", type=int, default=200)
    ap.add_argument("--iterations", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    data = out / "data"
    run = out / "train"

    for step in (
        ["gen-data", "--out", str(data), "--n", str(args.n),
         "--seed", str(args.seed)],
        ["train", "--data", str(data), "--out", str(run),
         "--iterations", str(args.iterations), "--seed", str(args.seed)],
        ["translate", "--ckpt", str(run / "checkpoints" / "final.ckpt"),
         "--data", str(data), "--out", str(out / "translations"),
         "--direction", "t2c", "--styles", "2"],
        ["evaluate", "--ckpt", str(run / "checkpoints" / "final.ckpt"),
         "--data", str(data), "--report", str(out / "report.json"),
         "--n", "32"],
    ):
        print("+", " ".join(step), flush=True)
        rc = cli(step)
        if rc != 0:
            print(f"step failed with exit code {rc}", file=sys.stderr)
            return rc
    print(f"smoke run complete; report at {out / 'report.json'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
