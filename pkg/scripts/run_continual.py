#!/usr/bin/env python3
"""Forgetting comparison: warm-start on image-text pairs, then continue on
graph triplets twice, with and without distilling from the frozen warm model
on interleaved pair batches. Reports median pair-retrieval degradation."""

import argparse
import os

os.environ.setdefault("OMP_NUM_THREADS", "1")

from kgfusion.experiments import continual


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", default="runs/continual")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--pairs", type=int, default=64)
    ap.add_argument("--warm-steps", type=int, default=250)
    ap.add_argument("--cont-steps", type=int, default=250)
    args = ap.parse_args()

    report = continual(out_dir=args.out_dir, seeds=tuple(args.seeds),
                       n_pairs=args.pairs, warm_steps=args.warm_steps,
                       cont_steps=args.cont_steps)
    for i, seed in enumerate(report.seeds):
        print(f"seed {seed}: warm R@1 {report.warm_r_at_1[i]:.3f} -> "
              f"distilled {report.after_with_kd[i]:.3f}, "
              f"plain {report.after_without_kd[i]:.3f}")
    print(f"median degradation: distilled {report.median_degradation_kd:.3f}, "
          f"plain {report.median_degradation_no_kd:.3f}")
    print(("PASS" if report.passed else "FAIL")
          + f": distilled drop is at most half the plain drop; report in {args.out_dir}")
    return 0 if report.passed else 1


if __name__ == "__main__":
    raise SystemExit(main())
