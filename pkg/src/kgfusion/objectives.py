"""Training objectives.

Four terms make up the total loss: a contrastive term between fused
head+relation anchors and candidate tails (e2e), relation classification off
the fusion output's relation slot (e2r), a contrastive term between entity
features before and after relation-weighted graph propagation (g2e), and a
distillation term against a frozen teacher's similarity rows (kd). A plain
symmetric contrastive loss over pooled features is kept as a reported
baseline but never enters the total. Every loss is a batch mean, so
magnitudes are batch-size invariant and the unweighted sum stays balanced.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ShapeError, Tensor


class Temperature(nn.Module):
    """Learnable softmax temperature, stored as log tau so tau stays positive."""

    def __init__(self, init: float = 0.07, dtype=np.float32):
        super().__init__()
        if init <= 0:
            raise ValueError(f"temperature must be positive, got {init}")
        self.log_tau = self.param("log_tau", np.log(init), dtype)

    def inverse(self) -> Tensor:
        return ad.exp(ad.neg(self.log_tau))

    @property
    def value(self) -> float:
        return float(np.exp(self.log_tau.data))


class RelationHead(nn.Module):
    """Two-layer MLP from the relation slot to relation logits."""

    def __init__(self, d_m: int, n_relations: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.n_relations = n_relations
        self.fc1 = self.child("fc1", nn.Linear(d_m, d_m, rng, dtype))
        self.fc2 = self.child("fc2", nn.Linear(d_m, n_relations, rng, dtype))

    def __call__(self, r_feats: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(r_feats)))


class GnnWeights(nn.Module):
    """Per-layer weight vectors that score edges from relation features."""

    def __init__(self, n_layers: int, d_m: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        if n_layers < 1:
            raise ValueError("propagation needs at least one layer")
        self.n_layers = n_layers
        self.w = self.param("w", rng.normal(0.0, d_m ** -0.5, size=(n_layers, d_m)), dtype)


def scaled_cosines(a: Tensor, b: Tensor, temp: Temperature) -> Tensor:
    return ad.mul(ad.cosine_similarity(a, b), temp.inverse())


def info_nce(anchors: Tensor, candidates: Tensor, temp: Temperature) -> Tensor:
    """Mean cross-entropy of scaled cosines against the diagonal match."""
    n = anchors.shape[0]
    if candidates.shape[0] != n:
        raise ShapeError(f"anchor/candidate counts differ: {n} vs {candidates.shape[0]}")
    logits = scaled_cosines(anchors, candidates, temp)
    return ad.cross_entropy(logits, np.arange(n))


def clip_loss(image_feats: Tensor, text_feats: Tensor, temp: Temperature) -> Tensor:
    """Symmetric contrastive loss over pooled features (reported baseline)."""
    if image_feats.shape[0] < 1:
        raise ShapeError("clip loss needs at least one pair")
    logits = scaled_cosines(image_feats, text_feats, temp)
    labels = np.arange(image_feats.shape[0])
    fwd = ad.cross_entropy(logits, labels)
    bwd = ad.cross_entropy(ad.transpose(logits, (1, 0)), labels)
    return ad.scale(ad.add(fwd, bwd), 0.5)


def e2e_loss(anchor_y: Tensor, tail_y: Tensor, temp: Temperature,
             tail_ids: list[str] | None = None) -> Tensor:
    """Anchors carry head+relation; candidates are tail-only fusions."""
    if tail_ids is not None and len(set(tail_ids)) != len(tail_ids):
        raise ValueError("e2e batch has duplicate tails; negatives must differ")
    return info_nce(anchor_y, tail_y, temp)


def e2r_loss(r_feats: Tensor, labels: np.ndarray, head: RelationHead) -> Tensor:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= head.n_relations):
        raise ValueError(
            f"relation ids must lie in [0, {head.n_relations}), got range "
            f"[{labels.min()}, {labels.max()}]")
    return ad.cross_entropy(head(r_feats), labels)


def g2e_loss(entity_y: Tensor, propagated: Tensor, temp: Temperature) -> Tensor:
    """Pre-propagation features against post-propagation candidates,
    normalized by the size of the entity set."""
    if entity_y.shape[0] < 1:
        raise ShapeError("g2e loss needs at least one entity")
    return info_nce(entity_y, propagated, temp)


def gnn_propagate(y0: Tensor, edges: list[tuple[int, int]], relation_feats: Tensor,
                  weights: GnnWeights) -> Tensor:
    """Relation-weighted propagation over a small subgraph.

    y0: (M, d_m) initial entity features; edges: (head_index, tail_index)
    aligned with relation_feats rows. Each layer scores every edge by dotting
    its relation feature with that layer's weight vector, softmax-normalizes
    over the incoming edges of each node, and replaces the node's feature
    with the weighted sum of its heads' features. Nodes with no incoming
    edges keep their feature.
    """
    n_nodes = y0.shape[0]
    if len(edges) != relation_feats.shape[0]:
        raise ShapeError(f"{len(edges)} edges but {relation_feats.shape[0]} relation features")
    incoming: dict[int, list[int]] = {}
    for k, (h, t) in enumerate(edges):
        if not (0 <= h < n_nodes and 0 <= t < n_nodes):
            raise ShapeError(f"edge ({h}, {t}) out of range for {n_nodes} nodes")
        incoming.setdefault(t, []).append(k)
    g = y0
    for layer in range(weights.n_layers):
        if edges:
            w_col = ad.reshape(ad.take(weights.w, layer), (relation_feats.shape[1], 1))
            scores = ad.matmul(relation_feats, w_col)  # (E, 1)
        rows = []
        for t in range(n_nodes):
            inc = incoming.get(t)
            if not inc:
                rows.append(ad.take(g, slice(t, t + 1)))
                continue
            idx = np.asarray(inc)
            alphas = ad.softmax(ad.reshape(ad.take(scores, idx), (1, len(inc))))
            heads = ad.take(g, np.asarray([edges[k][0] for k in inc]))
            rows.append(ad.matmul(alphas, heads))
        g = ad.concat(rows, axis=0)
    return g


def kd_loss(student_sims: Tensor, teacher_sims: np.ndarray, student_temp: Temperature,
            teacher_tau: float) -> Tensor:
    """Mean over rows and columns of KL(teacher || student); the teacher side
    is a constant, so no gradient reaches it."""
    if student_sims.shape != tuple(np.shape(teacher_sims)):
        raise ShapeError(
            f"similarity shapes differ: student {student_sims.shape} vs "
            f"teacher {np.shape(teacher_sims)}")
    t_logits = ad.constant(np.asarray(teacher_sims) / teacher_tau, dtype=student_sims.data.dtype)
    s_logits = ad.mul(student_sims, student_temp.inverse())
    rows = ad.kl_divergence(t_logits, s_logits)
    cols = ad.kl_divergence(ad.transpose(t_logits, (1, 0)), ad.transpose(s_logits, (1, 0)))
    return ad.scale(ad.add(rows, cols), 0.5)


@dataclass(frozen=True)
class LossReport:
    e2e: float
    e2r: float
    g2e: float
    kd: float
    clip_baseline: float
    total: float

    def to_dict(self) -> dict[str, float]:
        return {
            "e2e": self.e2e, "e2r": self.e2r, "g2e": self.g2e, "kd": self.kd,
            "clip_baseline": self.clip_baseline, "total": self.total,
        }


def total_loss(e2e: Tensor | None, e2r: Tensor | None, g2e: Tensor | None,
               kd: Tensor | None, clip_baseline: Tensor | None = None,
               include_clip: bool = False, dtype=np.float32) -> tuple[Tensor, LossReport]:
    """Unweighted sum of the active components plus a scalar report.

    Absent components contribute zero. The pair-contrastive term is reported
    as a baseline and joins the sum only with ``include_clip`` (pair-objective
    training, e.g. warm starts). Raises on any non-finite component.
    """
    total = ad.constant(np.zeros((), dtype=dtype))
    values = {}
    for name, term in (("e2e", e2e), ("e2r", e2r), ("g2e", g2e), ("kd", kd)):
        if term is None:
            values[name] = 0.0
            continue
        values[name] = term.item()
        total = ad.add(total, term)
    values["clip_baseline"] = clip_baseline.item() if clip_baseline is not None else 0.0
    if include_clip and clip_baseline is not None:
        total = ad.add(total, clip_baseline)
    values["total"] = total.item()
    bad = [k for k, v in values.items() if not np.isfinite(v)]
    if bad:
        raise FloatingPointError(f"non-finite loss components: {', '.join(bad)} ({values})")
    return total, LossReport(**values)
