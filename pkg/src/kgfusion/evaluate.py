"""Frozen-model evaluation: cross-modal retrieval, relation classification,
triplet link retrieval, propagation alignment, and a prompt-template probe.

Everything here runs the model in evaluation mode (no drop path, no sampled
content), so reports are pure functions of (model parameters, data). Ranking
ties resolve in favour of the smaller candidate index; with constant scores
that puts item i at rank i+1, so recall@1 over N items is exactly 1/N.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import (IMAGE, TEXT, BatchItem, Entity, GraphError, KnowledgeGraph,
                    SampledEnd, TripletBatch)
from .model import KgModel

LN2 = float(np.log(2.0))


def rank_with_ties(scores: np.ndarray, target: int, exclude=()) -> int:
    """1-based rank of ``target`` under descending score, smaller index first
    among ties. ``exclude`` drops candidates from the ranking entirely."""
    scores = np.asarray(scores, dtype=np.float64)
    keep = np.ones(scores.shape[0], dtype=bool)
    if len(exclude):
        keep[np.fromiter(exclude, dtype=int)] = False
    keep[target] = True
    s = scores[target]
    higher = (scores > s) & keep
    tied_earlier = (scores == s) & keep & (np.arange(scores.shape[0]) < target)
    return 1 + int(higher.sum()) + int(tied_earlier.sum())


def _recalls(ranks: list[int], ks) -> dict[int, float]:
    arr = np.asarray(ranks)
    return {int(k): float((arr <= k).mean()) for k in ks}


@dataclass(frozen=True)
class RetrievalReport:
    direction: str
    n: int
    recalls: dict[int, float]

    def to_dict(self) -> dict:
        return {"direction": self.direction, "n": self.n,
                "recalls": {str(k): v for k, v in sorted(self.recalls.items())}}

    def to_csv(self) -> str:
        lines = ["direction,k,recall"]
        lines += [f"{self.direction},{k},{v:.6f}" for k, v in sorted(self.recalls.items())]
        return "\n".join(lines) + "\n"


def retrieval_eval(model: KgModel, pairs: list, ks=(1, 5, 10)) -> tuple[RetrievalReport, RetrievalReport]:
    """Rank pooled-feature cosines both ways; returns (text→image, image→text)."""
    n = len(pairs)
    if not ks or min(ks) < 1:
        raise ValueError("ks must be positive")
    if n < max(ks):
        raise ValueError(f"need at least max(ks)={max(ks)} pairs, got {n}")
    images = [p[0] for p in pairs]
    captions = [p[1] for p in pairs]
    sims = model.pair_similarities(images, captions, rng=None, training=False).data
    t2i = [rank_with_ties(sims[:, j], j) for j in range(n)]
    i2t = [rank_with_ties(sims[i, :], i) for i in range(n)]
    return (RetrievalReport("text_to_image", n, _recalls(t2i, ks)),
            RetrievalReport("image_to_text", n, _recalls(i2t, ks)))


# ---------------------------------------------------------------------------
# triplet-level evaluation


def eval_end(entity: Entity) -> SampledEnd:
    """Deterministic endpoint content: the first description (texts precede
    images), unlike training which samples among all descriptions."""
    modality, content = entity.descriptions()[0]
    if modality == TEXT:
        return SampledEnd(entity.id, TEXT, text=content)
    return SampledEnd(entity.id, IMAGE, image=content)


def eval_batch(graph: KnowledgeGraph, indices) -> TripletBatch:
    items = []
    for i in indices:
        trip = graph.triplets[i]
        items.append(BatchItem(
            triplet_index=i,
            triplet=trip,
            head=eval_end(graph.entities[trip.head]),
            relation_id=trip.relation,
            relation_name=graph.relations[trip.relation].name,
            tail=eval_end(graph.entities[trip.tail]),
        ))
    return TripletBatch(items=items, seed=-1)


def relation_eval(model: KgModel, graph: KnowledgeGraph, indices=None, chunk: int = 32) -> float:
    """Accuracy of the relation classifier over (head, −, tail) inputs.
    Argmax ties resolve to the smaller relation id."""
    indices = list(range(graph.n_triplets)) if indices is None else list(indices)
    if not indices:
        raise GraphError("relation_eval needs at least one triplet")
    hits = 0
    for start in range(0, len(indices), chunk):
        batch = eval_batch(graph, indices[start:start + chunk])
        t = model.batch_tensors(batch, use_e2e=False, use_e2r=True, use_g2e=False,
                                rng=None, training=False)
        logits = model.rel_head(t.rel_r).data
        hits += int((np.argmax(logits, axis=1) == t.labels).sum())
    return hits / len(indices)


@dataclass(frozen=True)
class LinkReport:
    n: int
    filtered: bool
    recalls: dict[int, float]
    mean_rank: float

    @property
    def r_at_1(self) -> float:
        return self.recalls[1]

    def to_dict(self) -> dict:
        return {"n": self.n, "filtered": self.filtered, "mean_rank": self.mean_rank,
                "recalls": {str(k): v for k, v in sorted(self.recalls.items())}}


def link_eval(model: KgModel, graph: KnowledgeGraph, indices=None, ks=(1,),
              filtered: bool = True, chunk: int = 32) -> LinkReport:
    """Rank each (head, relation, −) anchor against every (−, −, tail)
    candidate by fused-output cosine. With ``filtered`` (the usual link
    prediction protocol) candidates that are other true tails of the same
    (head, relation) are dropped, so a model that scores all correct
    completions equally is not penalized for the dataset's one-to-many edges."""
    indices = list(range(graph.n_triplets)) if indices is None else list(indices)
    if not indices:
        raise GraphError("link_eval needs at least one triplet")
    anchors, tails = [], []
    for start in range(0, len(indices), chunk):
        batch = eval_batch(graph, indices[start:start + chunk])
        t = model.batch_tensors(batch, use_e2e=True, use_e2r=False, use_g2e=False,
                                rng=None, training=False)
        anchors.append(t.anchor_y.data.astype(np.float64))
        tails.append(t.tail_y.data.astype(np.float64))
    a = np.concatenate(anchors, axis=0)
    b = np.concatenate(tails, axis=0)
    a /= np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
    b /= np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
    sims = a @ b.T

    true_tails: dict[tuple[str, int], set[str]] = {}
    for trip in graph.triplets:
        true_tails.setdefault((trip.head, trip.relation), set()).add(trip.tail)
    ranks = []
    for row, i in enumerate(indices):
        trip = graph.triplets[i]
        exclude = []
        if filtered:
            positives = true_tails[(trip.head, trip.relation)]
            exclude = [col for col, j in enumerate(indices)
                       if col != row and graph.triplets[j].tail in positives]
        ranks.append(rank_with_ties(sims[row], row, exclude))
    return LinkReport(n=len(indices), filtered=filtered, recalls=_recalls(ranks, ks),
                      mean_rank=float(np.mean(ranks)))


def in_batch_link_eval(model: KgModel, graph: KnowledgeGraph, batch_size: int = 16,
                       seed: int = 0, filtered: bool = True) -> float:
    """R@1 of (head, relation, −) against the tails of its own batch, averaged
    over a seeded partition of all triplets. Matches the training-time
    contrastive setup (a handful of in-batch negatives) rather than ranking
    against the whole entity set."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(graph.n_triplets)
    hits, n = 0.0, 0
    for start in range(0, len(order), batch_size):
        idx = [int(i) for i in order[start:start + batch_size]]
        rep = link_eval(model, graph, indices=idx, ks=(1,), filtered=filtered)
        hits += rep.recalls[1] * rep.n
        n += rep.n
    return hits / n


def alignment_eval(model: KgModel, graph: KnowledgeGraph) -> float:
    """R@1 of each entity's fused output against the graph-propagated
    features of the whole entity set (the propagation objective as retrieval)."""
    if graph.n_triplets == 0:
        raise GraphError("alignment_eval needs at least one triplet")
    batch = eval_batch(graph, range(graph.n_triplets))
    t = model.batch_tensors(batch, use_e2e=False, use_e2r=False, use_g2e=True,
                            graph=graph, rng=None, training=False)
    y = t.entity_y.data.astype(np.float64)
    g = t.propagated.data.astype(np.float64)
    y /= np.maximum(np.linalg.norm(y, axis=1, keepdims=True), 1e-12)
    g /= np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
    sims = y @ g.T
    ranks = [rank_with_ties(sims[i], i) for i in range(sims.shape[0])]
    return float((np.asarray(ranks) == 1).mean())


# ---------------------------------------------------------------------------
# prompt-template probe


@dataclass(frozen=True)
class ProbeReport:
    templates: list[str]
    class_names: list[str]
    rows: dict[str, np.ndarray] = field(repr=False)  # template -> (n_items, n_classes)
    item_js: np.ndarray = field(repr=False)          # mean pairwise JS per item
    mean_js: float = 0.0

    def to_dict(self) -> dict:
        return {
            "templates": self.templates,
            "class_names": self.class_names,
            "rows": {t: r.tolist() for t, r in self.rows.items()},
            "item_js": self.item_js.tolist(),
            "mean_js": self.mean_js,
            "divergence": "jensen-shannon (natural log, bounded by ln 2)",
        }

    def to_csv(self) -> str:
        lines = ["template,item,class,prob"]
        for tpl, mat in self.rows.items():
            for i in range(mat.shape[0]):
                for c, name in enumerate(self.class_names):
                    lines.append(f"\"{tpl}\",{i},{name},{mat[i, c]:.6f}")
        return "\n".join(lines) + "\n"


def js_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """Jensen-Shannon divergence in nats; 0 for identical rows, at most ln 2."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    m = 0.5 * (p + q)
    kl_pm = float(np.sum(np.where(p > 0, p * np.log(np.maximum(p, 1e-300) / m), 0.0)))
    kl_qm = float(np.sum(np.where(q > 0, q * np.log(np.maximum(q, 1e-300) / m), 0.0)))
    return 0.5 * kl_pm + 0.5 * kl_qm


def template_probe(model: KgModel, images: list[np.ndarray], class_names: list[str],
                   templates: list[str], temperature: float | None = None) -> ProbeReport:
    """Class-probability rows per prompt template and their per-image
    divergence. Softmax runs over cosine / temperature (the model's learned
    temperature unless overridden). Templates must contain ``{}``."""
    if len(class_names) < 2:
        raise ValueError("template_probe needs at least 2 class names")
    if len(templates) < 2:
        raise ValueError("template_probe needs at least 2 templates")
    if not images:
        raise ValueError("template_probe needs at least one image")
    for tpl in templates:
        if "{}" not in tpl:
            raise ValueError(f"template {tpl!r} has no {{}} slot for the class name")
    tau = model.temp.value if temperature is None else float(temperature)
    img = model.pooled_images(images, rng=None, training=False).data.astype(np.float64)
    img /= np.maximum(np.linalg.norm(img, axis=1, keepdims=True), 1e-12)
    rows: dict[str, np.ndarray] = {}
    for tpl in templates:
        txt = model.pooled_texts([tpl.format(name) for name in class_names],
                                 rng=None, training=False).data.astype(np.float64)
        txt /= np.maximum(np.linalg.norm(txt, axis=1, keepdims=True), 1e-12)
        logits = (img @ txt.T) / tau
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        rows[tpl] = e / e.sum(axis=1, keepdims=True)
    n_items = len(images)
    js = np.zeros(n_items)
    n_pairs = 0
    for a in range(len(templates)):
        for b in range(a + 1, len(templates)):
            n_pairs += 1
            ra, rb = rows[templates[a]], rows[templates[b]]
            js += np.asarray([js_divergence(ra[i], rb[i]) for i in range(n_items)])
    js /= n_pairs
    return ProbeReport(templates=list(templates), class_names=list(class_names),
                       rows=rows, item_js=js, mean_js=float(js.mean()))


def write_report(report, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
