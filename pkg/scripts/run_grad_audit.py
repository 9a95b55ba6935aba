#!/usr/bin/env python3
"""Full finite-difference audit: every registered op and every training loss
differentiated through the whole model, across seeds, at 64-bit."""

import argparse
import json
import os
from pathlib import Path

os.environ.setdefault("OMP_NUM_THREADS", "1")

from kgfusion.gradcheck import run_suite


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--tol", type=float, default=1e-4)
    ap.add_argument("--out", default="runs/grad_audit.json")
    args = ap.parse_args()

    report = run_suite(n_seeds=args.seeds, tol=args.tol, verbose=True)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    print(f"max rel err {report.max_rel_err:.3e} over {len(report.results)} checks "
          f"in {report.seconds:.1f}s -> {'PASS' if report.passed else 'FAIL'}")
    return 0 if report.passed else 1


if __name__ == "__main__":
    raise SystemExit(main())
