"""Triplet sequence assembly and the multi-modal fusion encoder.

A fusion sequence is [head token | head slots | relation slot | tail slots].
Entity feature maps are projected d_o -> d_m and get their element's learnable
encoding (one vector per element, broadcast over its slots). An absent element
becomes an all-zero block: no content, no encoding, so nothing about it can
leak into the output. The triplet representation Y is read at position 0 and
the relation representation R at position 1 + l_h.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ShapeError, Tensor


@dataclass(frozen=True)
class FusionConfig:
    d_m: int = 128
    n_layers: int = 2
    n_heads: int = 4
    mlp_ratio: int = 2
    l_h: int = 16
    l_t: int = 16
    drop_path_rate: float = 0.1

    @property
    def seq_len(self) -> int:
        return 2 + self.l_h + self.l_t

    @property
    def relation_index(self) -> int:
        return 1 + self.l_h

    def validate(self) -> None:
        if self.d_m % self.n_heads:
            raise ShapeError(f"width {self.d_m} not divisible by {self.n_heads} heads")
        if self.l_h < 1 or self.l_t < 1:
            raise ShapeError("entity blocks need at least one slot")


@dataclass
class FusionInput:
    seq: Tensor
    present: tuple[bool, bool, bool]


@dataclass
class FusionOutput:
    y: Tensor
    r: Tensor
    seq: Tensor


class FusionEncoder(nn.Module):
    def __init__(self, cfg: FusionConfig, d_o: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.d_o = d_o
        self.dtype = dtype
        self.head_token = self.param("head_token", rng.normal(0.0, 0.02, size=(cfg.d_m,)), dtype)
        self.pe_h = self.param("pe_h", rng.normal(0.0, 0.02, size=(cfg.d_m,)), dtype)
        self.pe_r = self.param("pe_r", rng.normal(0.0, 0.02, size=(cfg.d_m,)), dtype)
        self.pe_t = self.param("pe_t", rng.normal(0.0, 0.02, size=(cfg.d_m,)), dtype)
        # one projection shared by entity maps and the relation vector
        self.proj = self.child("proj", nn.Linear(d_o, cfg.d_m, rng, dtype))
        self.stack = self.child(
            "stack", nn.TransformerStack(cfg.n_layers, cfg.d_m, cfg.n_heads, cfg.mlp_ratio, rng, dtype))

    def _zeros(self, batch: int, slots: int) -> Tensor:
        return ad.constant(np.zeros((batch, slots, self.cfg.d_m), dtype=self.dtype))

    def _entity_block(self, feats: Tensor, slots: int, pe: Tensor, what: str,
                      token_mask: np.ndarray | None) -> Tensor:
        if feats.data.ndim != 3 or feats.shape[2] != self.d_o:
            raise ShapeError(f"{what} features must be (B, L, {self.d_o}), got {feats.shape}")
        length = feats.shape[1]
        if length > slots:
            raise ShapeError(f"{what} map length {length} exceeds {slots} slots")
        block = ad.add(self.proj(feats), pe)
        if token_mask is not None:
            if token_mask.shape != (feats.shape[0], length):
                raise ShapeError(
                    f"{what} token mask {token_mask.shape} does not match map ({feats.shape[0]}, {length})")
            if not token_mask.all():
                # pad positions become exact zeros: no projection bias, no encoding
                block = ad.mul(block, ad.constant(token_mask[..., None], dtype=self.dtype))
        if length < slots:
            block = ad.concat([block, self._zeros(feats.shape[0], slots - length)], axis=1)
        return block

    def assemble(self, h: Tensor | None = None, r: Tensor | None = None,
                 t: Tensor | None = None, h_mask: np.ndarray | None = None,
                 t_mask: np.ndarray | None = None, batch_size: int | None = None) -> FusionInput:
        """Build the fusion sequence; pass None for a masked element."""
        cfg = self.cfg
        present = [x for x in (h, r, t) if x is not None]
        if not present:
            raise ShapeError("fusion input needs at least one of head, relation, tail")
        sizes = {x.shape[0] for x in present}
        if batch_size is not None:
            sizes.add(batch_size)
        if len(sizes) != 1:
            raise ShapeError(f"inconsistent batch sizes in fusion input: {sorted(sizes)}")
        b = sizes.pop()
        head_tok = ad.add(self._zeros(b, 1), self.head_token)
        h_block = (self._entity_block(h, cfg.l_h, self.pe_h, "head", h_mask)
                   if h is not None else self._zeros(b, cfg.l_h))
        if r is not None:
            if r.data.ndim != 2 or r.shape[1] != self.d_o:
                raise ShapeError(f"relation vector must be (B, {self.d_o}), got {r.shape}")
            r_block = ad.add(ad.reshape(self.proj(r), (b, 1, cfg.d_m)), self.pe_r)
        else:
            r_block = self._zeros(b, 1)
        t_block = (self._entity_block(t, cfg.l_t, self.pe_t, "tail", t_mask)
                   if t is not None else self._zeros(b, cfg.l_t))
        seq = ad.concat([head_tok, h_block, r_block, t_block], axis=1)
        return FusionInput(seq=seq, present=(h is not None, r is not None, t is not None))

    def fuse(self, fin: FusionInput, rng=None, training: bool = False) -> FusionOutput:
        out = self.stack(fin.seq, drop_rate=self.cfg.drop_path_rate, rng=rng, training=training)
        return FusionOutput(
            y=ad.take(out, (slice(None), 0)),
            r=ad.take(out, (slice(None), self.cfg.relation_index)),
            seq=out,
        )

    def __call__(self, h=None, r=None, t=None, rng=None, training: bool = False) -> FusionOutput:
        return self.fuse(self.assemble(h=h, r=r, t=t), rng=rng, training=training)

    def fuse_many(self, fins: list[FusionInput], rng=None, training: bool = False) -> list[FusionOutput]:
        """Run several assembled groups through one batched forward pass."""
        seq = ad.concat([f.seq for f in fins], axis=0)
        out = self.stack(seq, drop_rate=self.cfg.drop_path_rate, rng=rng, training=training)
        outputs = []
        start = 0
        for f in fins:
            stop = start + f.seq.shape[0]
            rows = ad.take(out, slice(start, stop))
            outputs.append(FusionOutput(
                y=ad.take(rows, (slice(None), 0)),
                r=ad.take(rows, (slice(None), self.cfg.relation_index)),
                seq=rows,
            ))
            start = stop
        return outputs
