"""Whole-image feature providers for the global quantizer.

The real system uses exported image features from a pretrained vision
model, delivered as a plain V2LE file whose entry strings are image keys.
The toy extractor is a deterministic frozen stand-in: per-patch mean and
variance pooling followed by a fixed seeded linear map.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Protocol, Union

import numpy as np

from .codebooks import EmbeddingTable, Vocabulary, load_embeddings

__all__ = ["GlobalFeatureProvider", "ToyGlobalFeatures", "FileGlobalFeatures", "MissingGlobalFeature"]


class MissingGlobalFeature(KeyError):
    """No stored feature row for the requested image key."""


class GlobalFeatureProvider(Protocol):
    dim: int

    def features_for(self, image: np.ndarray, key: Optional[str] = None) -> np.ndarray: ...


class ToyGlobalFeatures:
    """Deterministic patch-statistics features of a fixed output dimension."""

    def __init__(self, dim: int, patches: int = 4, seed: int = 7):
        self.dim = dim
        self.patches = patches
        rng = np.random.default_rng(seed)
        in_dim = 3 * patches * patches * 2
        self._map = rng.standard_normal((dim, in_dim)) / np.sqrt(in_dim)

    def features_for(self, image: np.ndarray, key: Optional[str] = None) -> np.ndarray:
        arr = np.asarray(image, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise ValueError(f"ToyGlobalFeatures: expected (3, H, W), got {arr.shape}")
        p = self.patches
        h, w = arr.shape[1], arr.shape[2]
        if h < p or w < p:
            raise ValueError(f"ToyGlobalFeatures: image {arr.shape} smaller than {p}x{p} patch grid")
        ph, pw = h // p, w // p
        stats = []
        for c in range(3):
            grid = arr[c, : ph * p, : pw * p].reshape(p, ph, p, pw)
            stats.append(grid.mean(axis=(1, 3)).reshape(-1))
            stats.append(grid.var(axis=(1, 3)).reshape(-1))
        return self._map @ np.concatenate(stats)


class FileGlobalFeatures:
    """Features loaded from a V2LE file keyed by image name."""

    def __init__(self, vocab: Vocabulary, table: EmbeddingTable):
        self._rows = {name: table.as_f64()[i] for i, name in enumerate(vocab.entries)}
        self.dim = table.dim

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "FileGlobalFeatures":
        vocab, table = load_embeddings(path)
        if not isinstance(vocab, Vocabulary):
            raise ValueError(f"{path}: image feature files must use the plain vocabulary flavor")
        return cls(vocab, table)

    def features_for(self, image: np.ndarray, key: Optional[str] = None) -> np.ndarray:
        if key is None:
            raise MissingGlobalFeature("file-backed features require an image key")
        try:
            return self._rows[key]
        except KeyError:
            raise MissingGlobalFeature(f"no stored global features for image {key!r}") from None
