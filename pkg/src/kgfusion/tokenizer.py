"""Deterministic word-level tokenizer with byte fallback.

Lowercases, splits on whitespace and punctuation, looks words up in a fixed
vocabulary, and spells unknown words as UTF-8 byte tokens. Every sequence is
padded or truncated to a fixed length. Reserved ids: 0 pad, 1 begin, 2 end,
3 head (reserved for the fusion stage, never produced by the tokenizer).
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
HEAD_ID = 3

RESERVED_TOKENS = ("<pad>", "<s>", "</s>", "<head>")
BYTE_TOKENS = tuple(f"<0x{b:02X}>" for b in range(256))

ADJECTIVES = (
    "red", "blue", "green", "yellow", "purple", "orange", "black", "white",
    "big", "small", "tall", "short", "round", "square", "sharp", "soft",
    "bright", "dark", "heavy", "light", "fast", "slow", "old", "young",
    "warm", "cold", "wet", "dry", "loud", "quiet", "rough", "smooth",
)

NOUNS = (
    "fox", "owl", "bear", "wolf", "crow", "swan", "deer", "hare",
    "oak", "pine", "fern", "moss", "reed", "vine", "rose", "iris",
    "cube", "ring", "disk", "cone", "lens", "prism", "wheel", "arch",
    "river", "stone", "cloud", "flame", "field", "shore", "cliff", "cave",
)

FILLER_WORDS = (
    "a", "an", "the", "photo", "of", "not", "image", "caption", "picture",
    "is", "part", "near", "made", "kind", "inside", "above", "below",
    "linked", "to", "next", "holds", "faces", "beside", "under", "over",
    "around", "with", "and", "this", "that",
)

_SPLIT_RE = re.compile(r"[a-z0-9]+|[^a-z0-9\s]")


def default_vocab(size: int = 1024) -> list[str]:
    """Built-in vocabulary: reserved + byte tokens + word list, padded to ``size``."""
    words: list[str] = []
    seen = set()
    for w in ADJECTIVES + NOUNS + FILLER_WORDS:
        if w not in seen:
            seen.add(w)
            words.append(w)
    base = list(RESERVED_TOKENS) + list(BYTE_TOKENS) + words
    if size < len(base):
        raise ValueError(f"vocab size {size} too small, need at least {len(base)}")
    return base + [f"<unused{i}>" for i in range(size - len(base))]


def load_vocab(path: str | Path) -> list[str]:
    """One token per line; the line number is the id."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [line for line in lines]


def save_vocab(vocab: list[str], path: str | Path) -> None:
    Path(path).write_text("\n".join(vocab) + "\n", encoding="utf-8")


@dataclass
class TokenSequence:
    """Fixed-length id sequence with a pad mask (1 = real token, 0 = pad)."""

    ids: np.ndarray
    mask: np.ndarray


class Tokenizer:
    def __init__(self, vocab: list[str], seq_len: int):
        if len(set(vocab)) != len(vocab):
            raise ValueError("vocabulary has duplicate tokens")
        if seq_len < 2:
            raise ValueError("seq_len must fit begin and end tokens")
        self.vocab = list(vocab)
        self.seq_len = seq_len
        self._index = {tok: i for i, tok in enumerate(vocab)}
        for tok in RESERVED_TOKENS:
            if self._index.get(tok) != RESERVED_TOKENS.index(tok):
                raise ValueError(f"reserved token {tok!r} missing or misplaced in vocabulary")

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def _word_ids(self, word: str) -> list[int]:
        hit = self._index.get(word)
        if hit is not None:
            return [hit]
        ids = []
        for b in word.encode("utf-8"):
            tok = BYTE_TOKENS[b]
            bid = self._index.get(tok)
            if bid is None:
                raise ValueError(f"vocabulary lacks byte token {tok!r} needed for {word!r}")
            ids.append(bid)
        return ids

    def tokenize(self, text: str) -> TokenSequence:
        ids = [BOS_ID]
        for word in _SPLIT_RE.findall(text.lower()):
            ids.extend(self._word_ids(word))
        if len(ids) >= self.seq_len:
            ids = ids[: self.seq_len - 1] + [EOS_ID]
        else:
            ids = ids + [EOS_ID] + [PAD_ID] * (self.seq_len - len(ids) - 1)
        arr = np.asarray(ids, dtype=np.int64)
        return TokenSequence(ids=arr, mask=(arr != PAD_ID).astype(np.float32))
