"""Rule-based captioner, frequency-vote caption aggregator and a frozen
bag-of-tokens text encoder.

A caption is ``[class, pattern, brightness, quadrant]``:

* pattern: ``coarse`` or ``fine`` from the energy-weighted mean spatial
  frequency of the image;
* brightness: quartile of the mean pixel value (``dark`` < ``dim`` <
  ``bright`` < ``vivid``);
* quadrant: the quadrant holding the most energy about the image mean,
  ties going to the earlier of top-left, top-right, bottom-left,
  bottom-right.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass

import numpy as np
from scipy.fft import dctn

from .rng import substream

__all__ = [
    "MODE_TOKENS",
    "BRIGHTNESS_TOKENS",
    "QUADRANT_TOKENS",
    "Caption",
    "TextEmbedding",
    "Vocabulary",
    "caption",
    "template_caption",
    "aggregate",
    "embed",
]

MODE_TOKENS = ("coarse", "fine")
BRIGHTNESS_TOKENS = ("dark", "dim", "bright", "vivid")
QUADRANT_TOKENS = ("top-left", "top-right", "bottom-left", "bottom-right")
MAX_VOCAB = 64
MAX_CAPTION_LEN = 8
_N_ATTR = len(MODE_TOKENS) + len(BRIGHTNESS_TOKENS) + len(QUADRANT_TOKENS)


@dataclass(frozen=True)
class Caption:
    tokens: tuple

    def __post_init__(self):
        toks = tuple(int(t) for t in self.tokens)
        if not toks:
            raise ValueError("caption must contain at least one token")
        if len(toks) > MAX_CAPTION_LEN:
            raise ValueError(f"caption longer than {MAX_CAPTION_LEN} tokens: {toks}")
        if min(toks) < 0 or max(toks) >= MAX_VOCAB:
            raise ValueError(f"token id out of range: {toks}")
        object.__setattr__(self, "tokens", toks)

    def __len__(self):
        return len(self.tokens)


@dataclass(frozen=True)
class TextEmbedding:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if abs(np.linalg.norm(v) - 1.0) > 1e-9:
            raise ValueError("text embedding must have unit L2 norm")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple
    table: np.ndarray  # (dim, len(tokens)), unit-norm columns

    @classmethod
    def build(cls, class_names, seed: int = 0, dim: int = 32) -> "Vocabulary":
        tokens = tuple(class_names) + MODE_TOKENS + BRIGHTNESS_TOKENS + QUADRANT_TOKENS
        if len(set(tokens)) != len(tokens):
            raise ValueError(f"class names clash with attribute tokens: {class_names}")
        if len(tokens) > MAX_VOCAB:
            raise ValueError(f"vocabulary of {len(tokens)} tokens exceeds {MAX_VOCAB}")
        table = substream(seed, "vocab").standard_normal((dim, len(tokens)))
        table /= np.linalg.norm(table, axis=0, keepdims=True)
        table.setflags(write=False)
        return cls(tokens=tokens, table=table)

    @property
    def class_names(self) -> tuple:
        return self.tokens[: len(self.tokens) - _N_ATTR]

    @property
    def dim(self) -> int:
        return self.table.shape[0]

    def id(self, token: str) -> int:
        try:
            return self.tokens.index(token)
        except ValueError:
            raise KeyError(f"unknown token {token!r}") from None

    def words(self, cap: Caption) -> list:
        return [self.tokens[t] for t in cap.tokens]

    def to_json(self) -> str:
        return json.dumps({"tokens": {t: i for i, t in enumerate(self.tokens)}}, indent=2)


def _pattern_mode(px: np.ndarray, threshold: float) -> str:
    spec = dctn(px - px.mean(), norm="ortho") ** 2
    total = spec.sum()
    if total <= 0.0:
        return MODE_TOKENS[0]
    u, v = np.meshgrid(np.arange(px.shape[0]), np.arange(px.shape[1]), indexing="ij")
    radius = float((np.hypot(u, v) * spec).sum() / total)
    return MODE_TOKENS[int(radius >= threshold)]


def _quadrant(px: np.ndarray) -> str:
    dev = (px - px.mean()) ** 2
    h2, w2 = px.shape[0] // 2, px.shape[1] // 2
    sums = [dev[:h2, :w2].sum(), dev[:h2, w2:].sum(), dev[h2:, :w2].sum(), dev[h2:, w2:].sum()]
    return QUADRANT_TOKENS[int(np.argmax(sums))]


def caption(pixels, class_name: str, vocab: Vocabulary, mode_threshold: float = 4.0) -> Caption:
    """Deterministic pseudo-caption of one image."""
    px = np.asarray(pixels, dtype=np.float64)
    if px.ndim != 2:
        raise ValueError(f"caption expects one (H, W) image, got shape {px.shape}")
    if class_name not in vocab.class_names:
        raise KeyError(f"unknown class name {class_name!r}")
    bucket = min(int(px.mean() * 4), 3)
    words = [class_name, _pattern_mode(px, mode_threshold), BRIGHTNESS_TOKENS[bucket], _quadrant(px)]
    return Caption(tuple(vocab.id(w) for w in words))


def template_caption(class_name: str, vocab: Vocabulary) -> Caption:
    """Fixed per-class caption holding only the class token."""
    return Caption((vocab.id(class_name),))


def aggregate(captions, keep_ratio: float = 0.5, cap: int = 8) -> Caption:
    """Merge a cluster's captions by majority vote.

    Keeps tokens present in at least ``keep_ratio`` of the captions, most
    frequent first with ties by ascending id, truncated to ``cap``. The
    class token (the most common leading token) always comes first.
    """
    captions = list(captions)
    if not captions:
        raise ValueError("aggregate needs at least one caption")
    if not 0.0 < keep_ratio <= 1.0:
        raise ValueError(f"keep_ratio must be in (0, 1], got {keep_ratio}")
    if cap < 1:
        raise ValueError(f"cap must be >= 1, got {cap}")
    n = len(captions)
    leads = Counter(c.tokens[0] for c in captions)
    class_tok = min(leads, key=lambda t: (-leads[t], t))
    counts = Counter(t for c in captions for t in set(c.tokens))
    kept = [
        t
        for t in sorted(counts, key=lambda t: (-counts[t], t))
        if t != class_tok and counts[t] >= keep_ratio * n - 1e-12
    ]
    return Caption(tuple([class_tok] + kept)[:cap])


def embed(cap: Caption, vocab: Vocabulary) -> np.ndarray:
    """Unit-norm mean of the caption's token embedding columns."""
    if not len(cap):
        raise ValueError("cannot embed an empty caption")
    if max(cap.tokens) >= len(vocab.tokens):
        raise KeyError(f"caption token outside vocabulary: {cap.tokens}")
    v = vocab.table[:, list(cap.tokens)].mean(axis=1)
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise ValueError("caption embedding vanished")
    return v / norm
