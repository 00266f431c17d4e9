#!/usr/bin/env python3
"""Ablation matrix: train once with each objective term disabled and compare
metrics reports side by side.

Usage: python scripts/run_ablations.py --data DIR [--out DIR] [--iterations 500]
(generate DIR first with `posagan gen-data`).
"""

import argparse
import json
import sys
from pathlib import Path

from posagan.cli import main as cli
from posagan.core import LOSS_NAMES


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--data", required=True)
    ap.add_argument("--out", default="runs/ablations")
    ap.add_argument("--iterations", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    reports = {}
    for name in LOSS_NAMES:
        run = out / f"no_{name}"
        steps = (
            ["train", "--data", args.data, "--out", str(run),
             "--iterations", str(args.iterations), "--seed", str(args.seed),
             "--disable-loss", name],
            ["evaluate", "--ckpt", str(run / "checkpoints" / "final.ckpt"),
             "--data", args.data, "--report", str(run / "report.json"),
             "--n", "32"],
        )
        for step in steps:
            print("+", " ".join(step), flush=True)
            rc = cli(step)
            if rc != 0:
                print(f"ablation {name!r} failed with exit code {rc}",
                      file=sys.stderr)
                return rc
        reports[name] = json.loads((run / "report.json").read_text())

    print(f"\n{'disabled':<14}{'inception':>12}{'diversity':>12}")
    for name, rep in reports.items():
        print(f"{name:<14}{rep['inception_proxy']:>12.4f}"
              f"{rep['diversity_proxy']:>12.4f}")
    summary = out / "summary.json"
    summary.write_text(json.dumps(reports, indent=1, sort_keys=True))
    print(f"\nfull reports: {summary}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
