"""Frozen-codebook quantization against per-patch and whole-image features.

Assignment uses squared Euclidean distance (argmin-equivalent to Euclidean)
with ties broken toward the lower row index. The production path runs a
blocked exhaustive scan using the |q|^2 - 2 q.e + |e|^2 expansion with
precomputed row norms; the ``*_exhaustive`` variants compute distances
directly from differences and exist as slow reference implementations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .autodiff import Tensor, gather_rows, linear, reshape
from .codebooks import EmbeddingTable

__all__ = [
    "Projector",
    "QuantizationResult",
    "project",
    "quantize_local",
    "quantize_local_exhaustive",
    "quantize_global",
    "quantize_global_exhaustive",
    "gather_quantized",
]

_BLOCK = 256


@dataclass
class QuantizationResult:
    """Assignment ids, the codebook rows they name, and squared distances."""

    token_ids: np.ndarray
    quantized_vectors: np.ndarray
    distances: np.ndarray
    metric: str = "squared_euclidean"


class Projector:
    """Trainable linear map from text-embedding space to the encoder space."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(in_dim)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(out_dim, in_dim)), requires_grad=True,
                             name="projector.weight")
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True, name="projector.bias")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def apply(self, table: Tensor) -> Tensor:
        """Graph node projecting every codebook row; gradients reach the projector."""
        return linear(table, self.weight, self.bias)

    def parameters(self) -> dict[str, Tensor]:
        return {"projector.weight": self.weight, "projector.bias": self.bias}


def project(projector: Projector, table: EmbeddingTable) -> EmbeddingTable:
    """Project a frozen table through the current projector weights.

    The result is a value snapshot (float64, not frozen); it must be
    recomputed whenever the projector changes.
    """
    if table.dim != projector.in_dim:
        raise ValueError(f"project: table dim {table.dim} does not match "
                         f"projector input dim {projector.in_dim}")
    out = table.as_f64() @ projector.weight.data.T + projector.bias.data
    return EmbeddingTable(out, frozen=False)


def _as_matrix(codebook: Union[EmbeddingTable, np.ndarray]) -> np.ndarray:
    if isinstance(codebook, EmbeddingTable):
        return codebook.as_f64()
    return np.asarray(codebook, dtype=np.float64)


def _check_queries(name: str, q: np.ndarray, rows: np.ndarray) -> None:
    if rows.size == 0:
        raise ValueError(f"{name}: empty codebook")
    if q.shape[-1] != rows.shape[1]:
        raise ValueError(f"{name}: feature dim {q.shape[-1]} does not match "
                         f"codebook dim {rows.shape[1]}")
    if not np.isfinite(q).all():
        raise ValueError(f"{name}: non-finite feature values")


def _flatten_features(features: Union[Tensor, np.ndarray]) -> tuple[np.ndarray, tuple]:
    arr = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    if arr.ndim < 2:
        raise ValueError(f"quantize_local: features must be at least 2-D, got shape {arr.shape}")
    lead = arr.shape[:-1]
    return arr.reshape(-1, arr.shape[-1]), lead


def quantize_local(features, codebook) -> QuantizationResult:
    """Nearest codebook row for every feature vector (h x w x d or k x d)."""
    rows = _as_matrix(codebook)
    q, lead = _flatten_features(features)
    _check_queries("quantize_local", q, rows)

    row_sq = np.einsum("ij,ij->i", rows, rows)
    ids = np.empty(q.shape[0], dtype=np.int64)
    dists = np.empty(q.shape[0], dtype=np.float64)
    for start in range(0, q.shape[0], _BLOCK):
        block = q[start : start + _BLOCK]
        d2 = row_sq[None, :] - 2.0 * (block @ rows.T)
        d2 += np.einsum("ij,ij->i", block, block)[:, None]
        best = np.argmin(d2, axis=1)  # first minimum = lowest index
        ids[start : start + _BLOCK] = best
        dists[start : start + _BLOCK] = np.maximum(d2[np.arange(len(best)), best], 0.0)
    return QuantizationResult(ids.reshape(lead), rows[ids].reshape(lead + (rows.shape[1],)), dists.reshape(lead))


def quantize_local_exhaustive(features, codebook) -> QuantizationResult:
    """Per-query direct-difference scan; reference path for the blocked kernel."""
    rows = _as_matrix(codebook)
    q, lead = _flatten_features(features)
    _check_queries("quantize_local", q, rows)
    ids = np.empty(q.shape[0], dtype=np.int64)
    dists = np.empty(q.shape[0], dtype=np.float64)
    for i in range(q.shape[0]):
        d = ((rows - q[i]) ** 2).sum(axis=1)
        ids[i] = int(np.argmin(d))
        dists[i] = d[ids[i]]
    return QuantizationResult(ids.reshape(lead), rows[ids].reshape(lead + (rows.shape[1],)), dists.reshape(lead))


def _top_k_ids(d2: np.ndarray, k: int) -> np.ndarray:
    """k smallest distances, ascending, ties by ascending index."""
    n = d2.shape[0]
    if k == n:
        chosen = np.arange(n)
    else:
        part = np.argpartition(d2, k - 1)[:k]
        tau = d2[part].max()
        strict = np.flatnonzero(d2 < tau)
        equal = np.flatnonzero(d2 == tau)
        chosen = np.concatenate([strict, equal[: k - strict.size]])
    order = np.lexsort((chosen, d2[chosen]))
    return chosen[order]


def quantize_global(feature, codebook, k_global: int) -> QuantizationResult:
    """The k nearest codebook rows to a single feature vector, sorted."""
    rows = _as_matrix(codebook)
    f = feature.data if isinstance(feature, Tensor) else np.asarray(feature, dtype=np.float64)
    if f.ndim != 1:
        raise ValueError(f"quantize_global: feature must be 1-D, got shape {f.shape}")
    _check_queries("quantize_global", f, rows)
    if not 1 <= k_global <= rows.shape[0]:
        raise ValueError(f"quantize_global: k_global {k_global} out of range "
                         f"for codebook with {rows.shape[0]} rows")
    d2 = np.einsum("ij,ij->i", rows, rows) - 2.0 * (rows @ f)
    d2 += float(f @ f)
    ids = _top_k_ids(d2, k_global)
    return QuantizationResult(ids, rows[ids], np.maximum(d2[ids], 0.0))


def quantize_global_exhaustive(feature, codebook, k_global: int) -> QuantizationResult:
    """Full stable sort over direct-difference distances; reference path."""
    rows = _as_matrix(codebook)
    f = feature.data if isinstance(feature, Tensor) else np.asarray(feature, dtype=np.float64)
    _check_queries("quantize_global", f, rows)
    if not 1 <= k_global <= rows.shape[0]:
        raise ValueError(f"quantize_global: k_global {k_global} out of range "
                         f"for codebook with {rows.shape[0]} rows")
    d = ((rows - f) ** 2).sum(axis=1)
    order = np.lexsort((np.arange(d.shape[0]), d))[:k_global]
    return QuantizationResult(order.astype(np.int64), rows[order], d[order])


def gather_quantized(table_node: Tensor, result: QuantizationResult) -> Tensor:
    """Rows of an in-graph table selected by a quantization result.

    Gradients scatter back into the table node, which is how the projector
    learns from loss terms that touch the quantized map.
    """
    flat_ids = np.asarray(result.token_ids).reshape(-1)
    gathered = gather_rows(table_node, flat_ids)
    lead = np.asarray(result.token_ids).shape
    return reshape(gathered, lead + (table_node.shape[1],))
