"""Task metrics: episode accuracy, token-image alignment, PSNR, utilization."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .backends import classify_exact_match
from .model import TokenMap

__all__ = ["accuracy", "clip_score", "rank_percentile_score", "psnr",
           "codebook_utilization", "EvalReport"]

PSNR_INF = math.inf


def accuracy(episodes: Sequence[tuple[str, str]]) -> float:
    """Fraction of (generated, label) pairs that match exactly."""
    if not episodes:
        raise ValueError("accuracy: no episodes")
    hits = sum(1 for generated, label in episodes if classify_exact_match(generated, label))
    return hits / len(episodes)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b) / (na * nb)


def clip_score(image_embedding: np.ndarray, token_text_embeddings: np.ndarray) -> float:
    """Mean cosine similarity between an image and its token embeddings."""
    img = np.asarray(image_embedding, dtype=np.float64)
    toks = np.asarray(token_text_embeddings, dtype=np.float64)
    if toks.ndim != 2 or img.ndim != 1 or toks.shape[1] != img.shape[0]:
        raise ValueError(f"clip_score: shapes {img.shape} and {toks.shape} incompatible")
    return float(np.mean([_cosine(img, row) for row in toks]))


def rank_percentile_score(
    image_embedding: np.ndarray,
    assigned_ids: Sequence[int],
    vocabulary_embeddings: np.ndarray,
    draws: int = 1000,
    seed: int = 0,
) -> float:
    """Percentile of the assigned tokens' mean similarity among random draws.

    A locally defined stand-in for a relative alignment score: the fraction
    of ``draws`` random same-size token sets whose mean cosine similarity
    does not exceed that of the assigned set.
    """
    vocab = np.asarray(vocabulary_embeddings, dtype=np.float64)
    ids = np.asarray(list(assigned_ids), dtype=np.int64)
    if ids.size == 0:
        raise ValueError("rank_percentile_score: no assigned tokens")
    target = clip_score(image_embedding, vocab[ids])
    rng = np.random.default_rng(seed)
    at_or_below = 0
    for _ in range(draws):
        sample = rng.choice(vocab.shape[0], size=ids.size, replace=False)
        if clip_score(image_embedding, vocab[sample]) <= target:
            at_or_below += 1
    return at_or_below / draws


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for images scaled to [0, 1].

    Identical inputs return the +inf sentinel.
    """
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"psnr: shapes {x.shape} and {y.shape} differ")
    mse = float(((x - y) ** 2).mean())
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(1.0 / mse)


def codebook_utilization(
    maps: Sequence[TokenMap],
    codebook_size: int,
    which: str = "local",
) -> tuple[np.ndarray, float]:
    """Histogram of token-id usage and the fraction of the codebook touched."""
    if codebook_size < 1:
        raise ValueError("codebook_utilization: codebook_size must be >= 1")
    if which not in ("local", "global"):
        raise ValueError(f"codebook_utilization: which must be local or global, got {which!r}")
    hist = np.zeros(codebook_size, dtype=np.int64)
    for tm in maps:
        ids = tm.flat_local() if which == "local" else tm.global_ids
        if ids.size and (ids.min() < 0 or ids.max() >= codebook_size):
            raise ValueError("codebook_utilization: token id outside codebook")
        hist += np.bincount(ids, minlength=codebook_size)
    return hist, float((hist > 0).sum() / codebook_size)


@dataclass
class EvalReport:
    """Aggregated run metrics with lossless JSON round-tripping."""

    task_accuracy: dict[str, float] = field(default_factory=dict)
    mean_clip_score: Optional[float] = None
    psnr_values: list[float] = field(default_factory=list)
    utilization: Optional[float] = None
    histogram: Optional[list[int]] = None
    metadata: dict = field(default_factory=dict)

    def psnr_summary(self) -> dict[str, float]:
        finite = [v for v in self.psnr_values if math.isfinite(v)]
        if not finite:
            return {"count": len(self.psnr_values), "mean": math.nan,
                    "min": math.nan, "max": math.nan}
        return {"count": len(self.psnr_values), "mean": float(np.mean(finite)),
                "min": float(np.min(finite)), "max": float(np.max(finite))}

    def to_json(self) -> str:
        doc = {
            "task_accuracy": self.task_accuracy,
            "mean_clip_score": self.mean_clip_score,
            "psnr_values": [None if math.isinf(v) else v for v in self.psnr_values],
            "utilization": self.utilization,
            "histogram": self.histogram,
            "metadata": self.metadata,
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        doc = json.loads(text)
        return cls(
            task_accuracy=dict(doc["task_accuracy"]),
            mean_clip_score=doc["mean_clip_score"],
            psnr_values=[PSNR_INF if v is None else float(v) for v in doc["psnr_values"]],
            utilization=doc["utilization"],
            histogram=doc["histogram"],
            metadata=dict(doc["metadata"]),
        )

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "EvalReport":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def summary_text(self) -> str:
        lines = []
        for task, acc in sorted(self.task_accuracy.items()):
            lines.append(f"accuracy[{task}] = {acc:.4f}")
        if self.mean_clip_score is not None:
            lines.append(f"mean clip score = {self.mean_clip_score:.4f}")
        if self.psnr_values:
            s = self.psnr_summary()
            lines.append(f"psnr: count={s['count']} mean={s['mean']:.2f} "
                         f"min={s['min']:.2f} max={s['max']:.2f}")
        if self.utilization is not None:
            lines.append(f"codebook utilization = {self.utilization:.4f}")
        return "\n".join(lines) if lines else "(empty report)"
