"""Dual uni-modal encoders.

Images are sliced into non-overlapping patches and text into fixed-length
token sequences; each runs through its own small Transformer. Entities keep
the full unpooled L x d_o feature map; relation phrases go through the text
encoder and are mean-pooled over non-pad positions down to a single vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ShapeError, Tensor
from .tokenizer import Tokenizer

TEXT = "text"
IMAGE = "image"


@dataclass(frozen=True)
class EncoderConfig:
    d_o: int = 64
    width: int = 64
    n_layers: int = 2
    n_heads: int = 4
    l_text: int = 16
    image_size: int = 32
    image_channels: int = 3
    patch_size: int = 8
    vocab_size: int = 1024
    mlp_ratio: int = 2
    drop_path_rate: float = 0.1

    @property
    def l_image(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def validate(self) -> None:
        if self.width % self.n_heads:
            raise ShapeError(f"width {self.width} not divisible by {self.n_heads} heads")
        if self.image_size % self.patch_size:
            raise ShapeError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.l_text < 2:
            raise ShapeError("l_text must fit begin and end tokens")


@dataclass
class FeatureMap:
    """Unpooled per-token features (B, L, d_o) with a token mask (B, L)."""

    features: Tensor
    token_mask: np.ndarray
    modality: str


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, H, W, C) -> (B, (H/P)*(W/P), P*P*C), row-major patch order."""
    if images.ndim != 4:
        raise ShapeError(f"expected batched images (B, H, W, C), got shape {images.shape}")
    b, h, w, c = images.shape
    p = patch_size
    if h % p or w % p:
        raise ShapeError(f"image {h}x{w} not divisible into {p}x{p} patches")
    grid = images.reshape(b, h // p, p, w // p, p, c)
    return grid.transpose(0, 1, 3, 2, 4, 5).reshape(b, (h // p) * (w // p), p * p * c)


class TextEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = self.child("tok_emb", nn.Embedding(cfg.vocab_size, cfg.width, rng, dtype))
        self.pos = self.param("pos", rng.normal(0.0, 0.02, size=(cfg.l_text, cfg.width)), dtype)
        self.stack = self.child(
            "stack", nn.TransformerStack(cfg.n_layers, cfg.width, cfg.n_heads, cfg.mlp_ratio, rng, dtype))
        self.out = self.child("out", nn.Linear(cfg.width, cfg.d_o, rng, dtype))

    def __call__(self, ids: np.ndarray, mask: np.ndarray, rng=None, training: bool = False) -> Tensor:
        if ids.ndim != 2 or ids.shape[1] != self.cfg.l_text:
            raise ShapeError(f"expected token ids (B, {self.cfg.l_text}), got shape {ids.shape}")
        x = ad.add(self.tok_emb(ids), self.pos)
        x = self.stack(x, key_mask=mask, drop_rate=self.cfg.drop_path_rate, rng=rng, training=training)
        return self.out(x)


class ImageEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        patch_dim = cfg.patch_size * cfg.patch_size * cfg.image_channels
        self.patch_proj = self.child("patch_proj", nn.Linear(patch_dim, cfg.width, rng, dtype))
        self.pos = self.param("pos", rng.normal(0.0, 0.02, size=(cfg.l_image, cfg.width)), dtype)
        self.stack = self.child(
            "stack", nn.TransformerStack(cfg.n_layers, cfg.width, cfg.n_heads, cfg.mlp_ratio, rng, dtype))
        self.out = self.child("out", nn.Linear(cfg.width, cfg.d_o, rng, dtype))

    def __call__(self, images: np.ndarray, rng=None, training: bool = False) -> Tensor:
        cfg = self.cfg
        if images.ndim != 4 or images.shape[1:] != (cfg.image_size, cfg.image_size, cfg.image_channels):
            raise ShapeError(
                f"expected images (B, {cfg.image_size}, {cfg.image_size}, {cfg.image_channels}), "
                f"got shape {images.shape}")
        patches = patchify(np.asarray(images, dtype=np.float32), cfg.patch_size)
        # center pixel values around zero before the linear projection
        x = self.patch_proj(ad.constant(patches * 2.0 - 1.0, dtype=self.pos.data.dtype))
        x = ad.add(x, self.pos)
        x = self.stack(x, drop_rate=cfg.drop_path_rate, rng=rng, training=training)
        return self.out(x)


class DualEncoders(nn.Module):
    """Text and image towers plus the relation pooling path."""

    def __init__(self, cfg: EncoderConfig, tokenizer: Tokenizer, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__()
        cfg.validate()
        if tokenizer.vocab_size != cfg.vocab_size:
            raise ShapeError(
                f"tokenizer vocab {tokenizer.vocab_size} != configured {cfg.vocab_size}")
        if tokenizer.seq_len != cfg.l_text:
            raise ShapeError(f"tokenizer length {tokenizer.seq_len} != configured {cfg.l_text}")
        self.cfg = cfg
        self.tokenizer = tokenizer
        self.text = self.child("text", TextEncoder(cfg, rng, dtype))
        self.image = self.child("image", ImageEncoder(cfg, rng, dtype))

    def tokenize_batch(self, texts: list[str]) -> tuple[np.ndarray, np.ndarray]:
        seqs = [self.tokenizer.tokenize(t) for t in texts]
        return np.stack([s.ids for s in seqs]), np.stack([s.mask for s in seqs])

    def encode_texts(self, texts: list[str], rng=None, training: bool = False) -> FeatureMap:
        ids, mask = self.tokenize_batch(texts)
        return FeatureMap(self.text(ids, mask, rng=rng, training=training), mask, TEXT)

    def encode_images(self, images: list[np.ndarray] | np.ndarray, rng=None,
                      training: bool = False) -> FeatureMap:
        batch = np.stack(images) if isinstance(images, list) else np.asarray(images)
        feats = self.image(batch, rng=rng, training=training)
        mask = np.ones(feats.shape[:2], dtype=np.float32)
        return FeatureMap(feats, mask, IMAGE)

    def encode_relations(self, names: list[str], rng=None, training: bool = False) -> Tensor:
        """Relation phrase -> pooled d_o vector (masked mean over real tokens)."""
        for name in names:
            if not name.strip():
                raise ShapeError("relation name is empty")
        fm = self.encode_texts(names, rng=rng, training=training)
        return nn.masked_mean(fm.features, fm.token_mask)

    def pooled(self, fm: FeatureMap) -> Tensor:
        """Global d_o feature per item: mean over non-pad positions."""
        return nn.masked_mean(fm.features, fm.token_mask)
