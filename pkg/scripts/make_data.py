#!/usr/bin/env python3
"""Generate the synthetic datasets the experiments use, as files on disk,
so the CLI verbs (train/eval/probe) can be exercised end to end.

Produces under --out-dir:
  graph.jsonl        32-entity / 4-relation / 128-triplet training graph
  sweep_graph.jsonl  16-entity mixed-modality graph used by the sweeps
  pairs.jsonl        64 image-caption pairs (warm-start / probe images)
"""

import argparse
import os

os.environ.setdefault("OMP_NUM_THREADS", "1")

from pathlib import Path

from kgfusion.experiments import OVERFIT_SPEC, SWEEP_SPEC
from kgfusion.graph import save_graph, save_pairs, synth_graph, synth_pairs


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", default="data")
    ap.add_argument("--pairs", type=int, default=64)
    args = ap.parse_args()

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, spec in (("graph.jsonl", OVERFIT_SPEC), ("sweep_graph.jsonl", SWEEP_SPEC)):
        graph = synth_graph(spec)
        save_graph(graph, out / name)
        print(f"{name}: {graph.n_entities} entities, {graph.n_relations} relations, "
              f"{graph.n_triplets} triplets")
    save_pairs(synth_pairs(args.pairs, seed=100, image_size=16), out / "pairs.jsonl")
    print(f"pairs.jsonl: {args.pairs} pairs")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
