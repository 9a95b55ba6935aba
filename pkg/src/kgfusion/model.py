"""The full model: dual encoders, fusion encoder, relation head, propagation
weights, and one shared learnable temperature.

Also owns the plumbing from a sampled triplet batch to loss tensors: encoding
mixed-modality endpoint batches, assembling the masked fusion variants, and
wiring the per-batch subgraph for propagation. All fusion variants of a step
run through one batched forward pass.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from . import objectives as obj
from .autodiff import ShapeError, Tensor
from .encoders import DualEncoders, EncoderConfig, FeatureMap
from .fusion import FusionConfig, FusionEncoder
from .graph import IMAGE, TEXT, KnowledgeGraph, SampledEnd, TripletBatch
from .tokenizer import Tokenizer, default_vocab


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    n_relations: int = 4
    gnn_layers: int = 2
    symmetric_e2e: bool = False
    temperature_init: float = 0.07
    seed: int = 0

    def validate(self) -> None:
        self.encoder.validate()
        self.fusion.validate()
        if self.n_relations < 1:
            raise ShapeError("model needs at least one relation class")
        for name, length in (("l_h", self.fusion.l_h), ("l_t", self.fusion.l_t)):
            if length < max(self.encoder.l_image, self.encoder.l_text):
                raise ShapeError(
                    f"fusion {name}={length} cannot hold encoder maps of length "
                    f"{max(self.encoder.l_image, self.encoder.l_text)}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        d["encoder"] = EncoderConfig(**d.get("encoder", {}))
        d["fusion"] = FusionConfig(**d.get("fusion", {}))
        return ModelConfig(**d)


@dataclass
class KgBatchTensors:
    """Everything a loss needs from one triplet batch."""

    labels: np.ndarray
    tail_ids: list[str]
    anchor_y: Tensor | None = None
    tail_y: Tensor | None = None
    rel_r: Tensor | None = None
    entity_ids: list[str] = field(default_factory=list)
    entity_y: Tensor | None = None
    propagated: Tensor | None = None
    head_anchor_y: Tensor | None = None
    head_y: Tensor | None = None
    head_ids: list[str] = field(default_factory=list)


class KgModel(nn.Module):
    def __init__(self, cfg: ModelConfig, vocab: list[str] | None = None, dtype=np.float32):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.default_rng(cfg.seed)
        self.tokenizer = Tokenizer(vocab or default_vocab(cfg.encoder.vocab_size), cfg.encoder.l_text)
        self.vocab = self.tokenizer.vocab
        self.encoders = self.child("encoders", DualEncoders(cfg.encoder, self.tokenizer, rng, dtype))
        self.fusion = self.child("fusion", FusionEncoder(cfg.fusion, cfg.encoder.d_o, rng, dtype))
        self.rel_head = self.child("rel_head", obj.RelationHead(cfg.fusion.d_m, cfg.n_relations, rng, dtype))
        self.gnn = self.child("gnn", obj.GnnWeights(cfg.gnn_layers, cfg.fusion.d_m, rng, dtype))
        self.temp = self.child("temp", obj.Temperature(cfg.temperature_init, dtype))

    def clone(self) -> "KgModel":
        """A structurally identical model with copied parameter values
        (named_params order is insertion order, so pairing is positional)."""
        other = KgModel(self.cfg, vocab=self.vocab, dtype=self.dtype)
        for (_, p), (_, q) in zip(self.named_params(), other.named_params()):
            q.data = p.data.copy()
        return other

    def param_groups(self) -> dict[str, list[tuple[str, Tensor]]]:
        """Two LR groups: the uni-modal towers, and everything downstream."""
        groups: dict[str, list[tuple[str, Tensor]]] = {"encoders": [], "fusion": []}
        for name, p in self.named_params():
            groups["encoders" if name.startswith("encoders.") else "fusion"].append((name, p))
        return groups

    # ------------------------------------------------------------------
    # encoding

    def encode_ends(self, ends: list[SampledEnd], rng=None, training: bool = False) -> FeatureMap:
        """Encode a modality-mixed list of endpoints, preserving order."""
        text_pos = [i for i, e in enumerate(ends) if e.modality == TEXT]
        image_pos = [i for i, e in enumerate(ends) if e.modality == IMAGE]
        parts, masks, order = [], [], []
        if text_pos:
            fm = self.encoders.encode_texts([ends[i].text for i in text_pos], rng, training)
            parts.append(fm.features)
            masks.append(fm.token_mask)
            order.extend(text_pos)
        if image_pos:
            fm = self.encoders.encode_images([ends[i].image for i in image_pos], rng, training)
            parts.append(fm.features)
            masks.append(fm.token_mask)
            order.extend(image_pos)
        # pad every map to one model-wide length so maps from different calls
        # stack; padded positions carry mask 0 and are zeroed again in fusion
        length = max(self.cfg.encoder.l_image, self.cfg.encoder.l_text)
        for k in range(len(parts)):
            short = length - parts[k].shape[1]
            if short:
                b = parts[k].shape[0]
                pad = np.zeros((b, short, parts[k].shape[2]), dtype=parts[k].data.dtype)
                parts[k] = ad.concat([parts[k], ad.constant(pad)], axis=1)
                masks[k] = np.concatenate(
                    [masks[k], np.zeros((b, short), dtype=masks[k].dtype)], axis=1)
        if len(parts) == 1:
            feats, mask = parts[0], masks[0]
            modality = TEXT if text_pos else IMAGE
        else:
            inverse = np.argsort(np.asarray(order))
            feats = ad.take(ad.concat(parts, axis=0), inverse)
            mask = np.concatenate(masks, axis=0)[inverse]
            modality = "mixed"
        return FeatureMap(feats, mask, modality)

    def relation_vectors(self, names: list[str], rng=None, training: bool = False) -> Tensor:
        """Encode each distinct relation phrase once and gather per item."""
        unique = list(dict.fromkeys(names))
        vecs = self.encoders.encode_relations(unique, rng, training)
        index = {n: i for i, n in enumerate(unique)}
        return ad.take(vecs, np.asarray([index[n] for n in names]))

    # ------------------------------------------------------------------
    # triplet batch pipeline

    def batch_tensors(self, batch: TripletBatch, use_e2e: bool = True, use_e2r: bool = True,
                      use_g2e: bool = True, graph: "KnowledgeGraph | None" = None,
                      rng=None, training: bool = False) -> KgBatchTensors:
        items = batch.items
        n = len(items)
        heads = self.encode_ends([it.head for it in items], rng, training)
        tails = self.encode_ends([it.tail for it in items], rng, training)
        out = KgBatchTensors(
            labels=np.asarray([it.relation_id for it in items]),
            tail_ids=[it.tail.entity_id for it in items],
        )

        fins = []
        slots: dict[str, int] = {}
        if use_e2e:
            rel_vecs = self.relation_vectors([it.relation_name for it in items], rng, training)
            slots["anchor"] = len(fins)
            fins.append(self.fusion.assemble(h=heads.features, r=rel_vecs, h_mask=heads.token_mask))
            slots["tail"] = len(fins)
            fins.append(self.fusion.assemble(t=tails.features, t_mask=tails.token_mask))
            if self.cfg.symmetric_e2e:
                slots["head_anchor"] = len(fins)
                fins.append(self.fusion.assemble(r=rel_vecs, t=tails.features, t_mask=tails.token_mask))
                slots["head_only"] = len(fins)
                fins.append(self.fusion.assemble(h=heads.features, h_mask=heads.token_mask))
        if use_e2r:
            slots["relmask"] = len(fins)
            fins.append(self.fusion.assemble(h=heads.features, t=tails.features,
                                             h_mask=heads.token_mask, t_mask=tails.token_mask))
        edges: list[tuple[int, int]] = []
        if use_g2e:
            # first occurrence of each entity id, scanning heads then tails
            # per item; row index into concat(heads, tails)
            seen: dict[str, int] = {}
            for i, it in enumerate(items):
                if it.head.entity_id not in seen:
                    seen[it.head.entity_id] = i
                if it.tail.entity_id not in seen:
                    seen[it.tail.entity_id] = n + i
            out.entity_ids = list(seen)
            entity_rows = [seen[e] for e in out.entity_ids]
            all_feats = ad.concat([heads.features, tails.features], axis=0)
            all_masks = np.concatenate([heads.token_mask, tails.token_mask], axis=0)
            ent_feats = ad.take(all_feats, np.asarray(entity_rows))
            ent_mask = all_masks[entity_rows]
            slots["entity"] = len(fins)
            fins.append(self.fusion.assemble(t=ent_feats, t_mask=ent_mask))
            # propagation edges: the graph's triplets restricted to the batch
            # entity set; without the graph, the batch's own triplets
            pos = {e: k for k, e in enumerate(out.entity_ids)}
            if graph is not None:
                for tail_id in out.entity_ids:
                    for ti in graph.incoming.get(tail_id, ()):
                        head_id = graph.triplets[ti].head
                        if head_id in pos:
                            edges.append((pos[head_id], pos[tail_id]))
            else:
                edges = [(pos[it.head.entity_id], pos[it.tail.entity_id]) for it in items]
            if edges:
                eh = np.asarray([e[0] for e in edges])
                et = np.asarray([e[1] for e in edges])
                slots["edge_r"] = len(fins)
                fins.append(self.fusion.assemble(
                    h=ad.take(ent_feats, eh), t=ad.take(ent_feats, et),
                    h_mask=ent_mask[eh], t_mask=ent_mask[et]))

        outs = self.fusion.fuse_many(fins, rng=rng, training=training)
        if use_e2e:
            out.anchor_y = outs[slots["anchor"]].y
            out.tail_y = outs[slots["tail"]].y
            if self.cfg.symmetric_e2e:
                out.head_anchor_y = outs[slots["head_anchor"]].y
                out.head_y = outs[slots["head_only"]].y
                out.head_ids = [it.head.entity_id for it in items]
        if use_e2r:
            out.rel_r = outs[slots["relmask"]].r
        if use_g2e:
            out.entity_y = outs[slots["entity"]].y
            edge_r = (outs[slots["edge_r"]].r if edges
                      else ad.constant(np.zeros((0, self.cfg.fusion.d_m), dtype=self.dtype)))
            out.propagated = obj.gnn_propagate(out.entity_y, edges, edge_r, self.gnn)
        return out

    def kg_losses(self, batch: TripletBatch, use_e2e: bool = True, use_e2r: bool = True,
                  use_g2e: bool = True, graph: "KnowledgeGraph | None" = None,
                  rng=None, training: bool = False) -> dict[str, Tensor]:
        t = self.batch_tensors(batch, use_e2e, use_e2r, use_g2e, graph, rng, training)
        losses: dict[str, Tensor] = {}
        if use_e2e:
            tail_term = obj.e2e_loss(t.anchor_y, t.tail_y, self.temp, t.tail_ids)
            if self.cfg.symmetric_e2e:
                head_term = obj.e2e_loss(t.head_anchor_y, t.head_y, self.temp, t.head_ids)
                tail_term = ad.scale(ad.add(tail_term, head_term), 0.5)
            losses["e2e"] = tail_term
        if use_e2r:
            losses["e2r"] = obj.e2r_loss(t.rel_r, t.labels, self.rel_head)
        if use_g2e:
            losses["g2e"] = obj.g2e_loss(t.entity_y, t.propagated, self.temp)
        return losses

    # ------------------------------------------------------------------
    # pooled pair pipeline (baseline contrastive, distillation, retrieval)

    def pooled_images(self, images: list[np.ndarray], rng=None, training: bool = False) -> Tensor:
        return self.encoders.pooled(self.encoders.encode_images(images, rng, training))

    def pooled_texts(self, texts: list[str], rng=None, training: bool = False) -> Tensor:
        return self.encoders.pooled(self.encoders.encode_texts(texts, rng, training))

    def pair_similarities(self, images: list[np.ndarray], captions: list[str],
                          rng=None, training: bool = False) -> Tensor:
        img = self.pooled_images(images, rng, training)
        txt = self.pooled_texts(captions, rng, training)
        return ad.cosine_similarity(img, txt)

    def pair_losses(self, images: list[np.ndarray], captions: list[str],
                    teacher: "KgModel | None" = None, rng=None,
                    training: bool = False) -> dict[str, Tensor]:
        sims = self.pair_similarities(images, captions, rng, training)
        n = len(captions)
        labels = np.arange(n)
        logits = ad.mul(sims, self.temp.inverse())
        fwd = ad.cross_entropy(logits, labels)
        bwd = ad.cross_entropy(ad.transpose(logits, (1, 0)), labels)
        losses = {"clip": ad.scale(ad.add(fwd, bwd), 0.5)}
        if teacher is not None:
            teacher_sims = teacher.pair_similarities(images, captions).data
            losses["kd"] = obj.kd_loss(sims, teacher_sims, self.temp, teacher.temp.value)
        return losses
