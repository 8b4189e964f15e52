"""Seeded synthetic fixtures: smooth images, vocabularies, embedding tables.

Used by the test suite and the demo scripts so the whole pipeline can run
without any real model assets.
"""

from __future__ import annotations

import numpy as np

from .codebooks import EmbeddingTable, TablePredictor, Vocabulary, render_ngram

__all__ = [
    "synthetic_image",
    "synthetic_images",
    "synthetic_vocabulary",
    "synthetic_table",
    "cyclic_predictor",
]


def synthetic_image(rng: np.random.Generator, size: int) -> np.ndarray:
    """A smooth random image: a few low-frequency waves per channel, in [0, 1]."""
    ys, xs = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    img = np.zeros((3, size, size))
    for c in range(3):
        acc = np.zeros((size, size))
        for _ in range(3):
            fx, fy = rng.uniform(0.5, 3.0, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            acc += rng.uniform(0.3, 1.0) * np.sin(2 * np.pi * (fx * xs + fy * ys) + phase)
        lo, hi = acc.min(), acc.max()
        img[c] = (acc - lo) / max(hi - lo, 1e-9)
    return img


def synthetic_images(rng: np.random.Generator, count: int, size: int) -> np.ndarray:
    return np.stack([synthetic_image(rng, size) for _ in range(count)])


def synthetic_vocabulary(n: int, stem: str = "tok") -> Vocabulary:
    return Vocabulary(tuple(f"{stem}{i}" for i in range(n)))


def synthetic_table(rng: np.random.Generator, rows: int, dim: int, frozen: bool = True) -> EmbeddingTable:
    matrix = rng.standard_normal((rows, dim)).astype(np.float32)
    return EmbeddingTable(matrix, frozen=frozen)


def cyclic_predictor(vocab: Vocabulary, m: int, prefix: str = "a photo of") -> TablePredictor:
    """Deterministic predictor: context hash walks the vocabulary cyclically.

    Covers every context reachable during expansion (tokens and bigrams).
    """
    n = len(vocab)
    table: dict[str, list[str]] = {}

    def preds_for(text: str) -> list[str]:
        h = sum(ord(ch) for ch in text)
        return [vocab.text((h + j) % n) for j in range(m)]

    for i, tok in enumerate(vocab.entries):
        ctx = f"{prefix} {tok}"
        table[ctx] = preds_for(ctx)
    for tok in vocab.entries:
        ctx1 = f"{prefix} {tok}"
        for cont in table[ctx1]:
            bigram = render_ngram((tok, cont))
            ctx2 = f"{prefix} {bigram}"
            table.setdefault(ctx2, preds_for(ctx2))
    return TablePredictor(table=table, prefix=prefix)
