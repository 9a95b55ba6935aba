#!/usr/bin/env python3
"""Objective ablation sweep: retrain the micro model with each of the three
graph objectives disabled in turn, per seed, and compare each objective's own
metric against the full model (median over seeds)."""

import argparse
import os

os.environ.setdefault("OMP_NUM_THREADS", "1")

from kgfusion.experiments import METRIC_OF, ablation


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", default="runs/ablation")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--steps", type=int, default=250)
    args = ap.parse_args()

    report = ablation(out_dir=args.out_dir, seeds=tuple(args.seeds), steps=args.steps)
    for variant, metric in METRIC_OF.items():
        full = report.medians["full"][metric]
        got = report.medians[variant][metric]
        mark = "worse (expected)" if report.strictly_worse[variant] else "NOT worse"
        print(f"{variant:8s} {metric}: {got:.3f} vs full {full:.3f}  -> {mark}")
    print(("PASS" if report.passed else "FAIL")
          + f": every ablation strictly hurts its metric; report in {args.out_dir}")
    return 0 if report.passed else 1


if __name__ == "__main__":
    raise SystemExit(main())
