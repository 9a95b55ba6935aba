"""Command-line entry point for the whole pipeline.

Verbs: synth, ingest, convert-pairs, train, eval, probe, grad-check,
inspect-checkpoint. Exit codes: 0 success, 1 usage error, 2 data error,
3 numerical failure.

Every run records a manifest (argv, resolved config and its hash, seed, tool
versions) before real work starts, so a failed attempt still documents what
was attempted: file-producing verbs write ``<out>.manifest.json`` next to the
output, directory verbs write ``manifest.json`` inside --out-dir, and the two
report verbs use name-scoped manifests since their default directory is the
working directory. Precedence for training settings is flags over config-file
fields over built-in defaults. The only environment variable honoured is
KGFUSION_LOG, which sets log verbosity.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .evaluate import (alignment_eval, link_eval, relation_eval, retrieval_eval,
                       template_probe, write_report)
from .gradcheck import run_suite
from .graph import (GraphError, SynthSpec, ingest_graph, load_pairs,
                    pairs_to_graph, save_graph, save_pairs, synth_graph,
                    synth_pairs)
from .model import KgModel, ModelConfig
from .trainer import (NumericalAbort, TrainConfig, Trainer, checkpoint_load,
                      checkpoint_save, read_checkpoint)

log = logging.getLogger("kgfusion")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as exceptions instead of exiting
    with its own status code (the contract here reserves 1 for usage)."""

    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# manifest and loading helpers


def _write_manifest(path: Path, command: str, config: dict, seed) -> None:
    blob = json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config": config,
        "config_sha256": hashlib.sha256(blob).hexdigest(),
        "seed": seed,
        "versions": {"kgfusion": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, default=str) + "\n", encoding="utf-8")


def _file_manifest(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.json")


def _load_graph(path: str):
    p = Path(path)
    if not p.is_file():
        raise DataError(f"graph file {p} not found")
    try:
        return ingest_graph(p)
    except GraphError as exc:
        raise DataError(f"{p}: {exc}") from exc


def _load_pairs(path: str) -> list:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"pair file {p} not found")
    try:
        return load_pairs(p)
    except GraphError as exc:
        raise DataError(f"{p}: {exc}") from exc


def _load_checkpoint(path: str):
    p = Path(path)
    if not p.is_file():
        raise DataError(f"checkpoint {p} not found")
    try:
        return checkpoint_load(p)
    except (ValueError, KeyError) as exc:
        raise DataError(f"{p}: {exc}") from exc


def _read_json(path: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"config file {p} not found")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{p}: malformed JSON ({exc.msg})") from exc


def _build_config(cls, section: dict, overrides: dict, label: str):
    merged = dict(section)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    try:
        cfg = cls(**merged) if cls is not ModelConfig else ModelConfig.from_dict(merged)
        cfg.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad {label} config: {exc}") from exc
    return cfg


# ---------------------------------------------------------------------------
# verbs


def _cmd_synth(args) -> int:
    out = Path(args.out)
    spec = SynthSpec(n_entities=args.entities, n_relations=args.relations,
                     n_triplets=args.triplets, seed=args.seed,
                     modality_mix=args.mix, image_size=args.image_size,
                     n_texts=args.texts, n_images=args.images)
    _write_manifest(_file_manifest(out), "synth", spec.__dict__, spec.seed)
    try:
        graph = synth_graph(spec)
    except GraphError as exc:
        raise UsageError(str(exc)) from exc
    save_graph(graph, out)
    print(f"wrote {graph.n_entities} entities, {graph.n_relations} relations, "
          f"{graph.n_triplets} triplets to {out}")
    return 0


def _cmd_synth_pairs(args) -> int:
    out = Path(args.out)
    cfg = {"pairs": args.pairs, "seed": args.seed, "image_size": args.image_size}
    _write_manifest(_file_manifest(out), "synth-pairs", cfg, args.seed)
    save_pairs(synth_pairs(args.pairs, seed=args.seed, image_size=args.image_size), out)
    print(f"wrote {args.pairs} pairs to {out}")
    return 0


def _cmd_ingest(args) -> int:
    out = Path(args.out)
    _write_manifest(_file_manifest(out), "ingest", {"input": args.input}, None)
    graph = _load_graph(args.input)
    save_graph(graph, out)
    print(f"ingested {graph.n_entities} entities, {graph.n_relations} relations, "
          f"{graph.n_triplets} triplets; canonical copy at {out}")
    return 0


def _cmd_convert_pairs(args) -> int:
    out = Path(args.out)
    cfg = {"pairs": args.pairs, "base_graph": args.base_graph}
    _write_manifest(_file_manifest(out), "convert-pairs", cfg, None)
    pairs = _load_pairs(args.pairs)
    base = ()
    if args.base_graph:
        base = tuple(_load_graph(args.base_graph).relation_names())
    try:
        graph = pairs_to_graph(pairs, base_relation_names=base)
    except GraphError as exc:
        raise DataError(str(exc)) from exc
    save_graph(graph, out)
    print(f"converted {len(pairs)} pairs into {graph.n_entities} entities, "
          f"{graph.n_triplets} triplets at {out}")
    return 0


def _cmd_train(args) -> int:
    out_dir = Path(args.out_dir)
    file_cfg = _read_json(args.config) if args.config else {}
    overrides = {"steps": args.steps, "seed": args.seed, "batch_size": args.batch_size,
                 "lr_encoders": args.lr_encoders, "lr_fusion": args.lr_fusion,
                 "pair_ratio": args.pair_ratio, "checkpoint_every": args.checkpoint_every}
    if args.resume:
        state = _load_checkpoint(args.resume)
        model, cfg, teacher = state.model, state.cfg, state.teacher
    else:
        state = None
        model_cfg = _build_config(ModelConfig, file_cfg.get("model", {}), {}, "model")
        cfg = _build_config(TrainConfig, file_cfg.get("train", {}), overrides, "train")
        teacher = _load_checkpoint(args.teacher).model if args.teacher else None
        model = KgModel(model_cfg)
    _write_manifest(out_dir / "manifest.json", "train",
                    {"model": model.cfg.to_dict(), "train": cfg.to_dict(),
                     "graph": args.graph, "pairs": args.pairs,
                     "teacher": args.teacher, "resume": args.resume}, cfg.seed)
    graph = _load_graph(args.graph)
    pairs = _load_pairs(args.pairs) if args.pairs else None
    try:
        if state is not None:
            trainer = Trainer.resume(state, graph, pairs=pairs, out_dir=out_dir)
        else:
            trainer = Trainer(model, cfg, graph, pairs=pairs, teacher=teacher,
                              out_dir=out_dir)
    except (GraphError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    try:
        report = trainer.run()
    finally:
        trainer.close()
    final = out_dir / "final.ckpt"
    checkpoint_save(trainer.state, final)
    last = f" total {report.total:.4f}" if report else ""
    print(f"trained to step {trainer.state.step};{last} checkpoint at {final}")
    return 0


def _cmd_eval(args) -> int:
    out_dir = Path(args.out_dir)
    ks = _parse_ks(args.ks)
    _write_manifest(out_dir / "manifest.json", "eval",
                    {"checkpoint": args.checkpoint, "graph": args.graph,
                     "pairs": args.pairs, "ks": ks}, None)
    model = _load_checkpoint(args.checkpoint).model
    graph = _load_graph(args.graph)
    try:
        link = link_eval(model, graph, ks=ks)
        results = {
            "relation_accuracy": relation_eval(model, graph),
            "link": link.to_dict(),
            "alignment_r_at_1": alignment_eval(model, graph),
        }
        if args.pairs:
            pairs = _load_pairs(args.pairs)
            t2i, i2t = retrieval_eval(model, pairs, ks=ks)
            results["retrieval"] = {"text_to_image": t2i.to_dict(),
                                    "image_to_text": i2t.to_dict()}
            (out_dir / "retrieval.csv").write_text(t2i.to_csv() + i2t.to_csv(),
                                                   encoding="utf-8")
    except (GraphError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    (out_dir / "eval_report.json").write_text(json.dumps(results, indent=2) + "\n",
                                              encoding="utf-8")
    print(f"relation accuracy {results['relation_accuracy']:.4f}, "
          f"link R@1 {link.recalls[1]:.4f}; report at {out_dir / 'eval_report.json'}")
    return 0


def _cmd_probe(args) -> int:
    out_dir = Path(args.out_dir)
    classes = [c.strip() for c in args.classes.split(",") if c.strip()]
    templates = [t.strip() for t in args.templates.split("|") if t.strip()]
    _write_manifest(out_dir / "manifest.json", "probe",
                    {"checkpoint": args.checkpoint, "pairs": args.pairs,
                     "classes": classes, "templates": templates,
                     "max_images": args.max_images}, None)
    model = _load_checkpoint(args.checkpoint).model
    images = [img for img, _ in _load_pairs(args.pairs)][: args.max_images]
    try:
        report = template_probe(model, images, classes, templates)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    write_report(report, out_dir / "probe_report.json")
    (out_dir / "probe_rows.csv").write_text(report.to_csv(), encoding="utf-8")
    print(f"mean JS divergence across templates {report.mean_js:.4f} "
          f"(0 = prompt-invariant, ln 2 = disjoint); report at "
          f"{out_dir / 'probe_report.json'}")
    return 0


def _cmd_grad_check(args) -> int:
    if args.precision != 64:
        raise UsageError("only --precision 64 is supported: finite differences "
                         "are meaningless at 32-bit")
    out_dir = Path(args.out_dir)
    cfg = {"seeds": args.seeds, "tol": args.tol, "coords": args.coords,
           "precision": args.precision}
    _write_manifest(out_dir / "grad_check_manifest.json", "grad-check", cfg, None)
    report = run_suite(n_seeds=args.seeds, tol=args.tol,
                       coords_per_tensor=args.coords, verbose=args.verbose)
    (out_dir / "grad_check_report.json").write_text(
        json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    print(f"max rel err {report.max_rel_err:.3e} over {len(report.results)} checks "
          f"({report.seconds:.1f}s); tolerance {report.tol:g}: "
          f"{'pass' if report.passed else 'FAIL'}")
    if not report.passed:
        for r in report.failures[:10]:
            print("  " + r.line(report.tol))
        raise NumericalAbort(f"gradient check failed at tolerance {report.tol:g}")
    return 0


def _cmd_inspect(args) -> int:
    out_dir = Path(args.out_dir)
    _write_manifest(out_dir / "inspect_manifest.json", "inspect-checkpoint",
                    {"checkpoint": args.checkpoint}, None)
    p = Path(args.checkpoint)
    if not p.is_file():
        raise DataError(f"checkpoint {p} not found")
    try:
        header, tensors = read_checkpoint(p)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    total = sum(t.nbytes for t in tensors.values())
    summary = {
        "step": header["step"], "opt_t": header["opt_t"],
        "has_teacher": header.get("teacher_config") is not None,
        "vocab_size": len(header["vocab"]),
        "n_tensors": len(tensors), "payload_bytes": total,
        "model_config": header["model_config"],
        "train_config": header["train_config"],
    }
    print(json.dumps(summary, indent=2))
    return 0


def _parse_ks(text: str) -> tuple[int, ...]:
    try:
        ks = tuple(int(k) for k in text.split(","))
    except ValueError as exc:
        raise UsageError(f"bad --ks {text!r}: comma-separated integers expected") from exc
    if not ks or min(ks) < 1:
        raise UsageError(f"bad --ks {text!r}: ranks must be >= 1")
    return ks


# ---------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    parser = _Parser(prog="kgfusion", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a deterministic synthetic graph")
    p.add_argument("--entities", type=int, required=True)
    p.add_argument("--relations", type=int, required=True)
    p.add_argument("--triplets", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mix", type=float, default=1.0,
                   help="fraction of entities that also carry text descriptions")
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--texts", type=int, default=1)
    p.add_argument("--images", type=int, default=1)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("synth-pairs", help="generate synthetic image-text pairs")
    p.add_argument("--pairs", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(fn=_cmd_synth_pairs)

    p = sub.add_parser("ingest", help="validate a graph file and write a canonical copy")
    p.add_argument("input")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(fn=_cmd_ingest)

    p = sub.add_parser("convert-pairs", help="turn image-text pairs into a pair graph")
    p.add_argument("pairs")
    p.add_argument("--base-graph", default=None,
                   help="existing graph whose relation ids the pair graph extends")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(fn=_cmd_convert_pairs)

    p = sub.add_parser("train", help="train on a graph, optionally with pair batches")
    p.add_argument("--graph", required=True)
    p.add_argument("--config", default=None, help='JSON {"model": {...}, "train": {...}}')
    p.add_argument("--pairs", default=None)
    p.add_argument("--teacher", default=None, help="checkpoint whose model distils pair steps")
    p.add_argument("--resume", default=None,
                   help="checkpoint to continue; its saved config wins over flags")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr-encoders", type=float, default=None)
    p.add_argument("--lr-fusion", type=float, default=None)
    p.add_argument("--pair-ratio", type=float, default=None)
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a graph (and pairs)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--pairs", default=None)
    p.add_argument("--ks", default="1,5,10")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("probe", help="prompt-template sensitivity probe")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pairs", required=True, help="pair file supplying the probe images")
    p.add_argument("--classes", required=True, help="comma-separated class names")
    p.add_argument("--templates", required=True,
                   help="pipe-separated templates, each containing {}")
    p.add_argument("--max-images", type=int, default=16)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=_cmd_probe)

    p = sub.add_parser("grad-check", help="finite-difference audit of ops and losses")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--coords", type=int, default=2,
                   help="coordinates probed per tensor")
    p.add_argument("--precision", type=int, default=64)
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(fn=_cmd_grad_check)

    p = sub.add_parser("inspect-checkpoint", help="print a checkpoint's header")
    p.add_argument("checkpoint")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(fn=_cmd_inspect)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("KGFUSION_LOG", "WARNING").upper())
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalAbort as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
