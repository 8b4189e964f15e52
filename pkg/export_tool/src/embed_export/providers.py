"""Embedding and next-token providers.

The ``clip``/``causal-lm`` providers load pretrained assets from a local
directory through torch + transformers (imported lazily, never required
for the stub paths). The ``stub`` providers are deterministic seeded
stand-ins so exports can be produced and validated fully offline.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import Sequence, Union

import numpy as np


class ProviderError(RuntimeError):
    pass


class MissingAssets(ProviderError):
    pass


def _seeded_rows(keys: Sequence[str], dim: int, namespace: str, seed: int) -> np.ndarray:
    rows = np.empty((len(keys), dim), dtype=np.float32)
    for i, key in enumerate(keys):
        digest = hashlib.blake2b(f"{namespace}\x00{seed}\x00{key}".encode("utf-8"),
                                 digest_size=8).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "little"))
        rows[i] = rng.standard_normal(dim).astype(np.float32)
    return rows


class StubTextProvider:
    """Deterministic text embeddings keyed by the text itself."""

    def __init__(self, dim: int = 16, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self.identifier = f"stub-text-d{dim}-s{seed}"

    def embed_texts(self, texts: Sequence[str], batch_size: int = 0) -> np.ndarray:
        return _seeded_rows(texts, self.dim, "text", self.seed)


class StubImageProvider:
    """Deterministic image embeddings from pixel statistics plus a seeded draw."""

    def __init__(self, dim: int = 16, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self.identifier = f"stub-image-d{dim}-s{seed}"

    def embed_images(self, images: Sequence[np.ndarray], batch_size: int = 0) -> np.ndarray:
        rows = np.empty((len(images), self.dim), dtype=np.float32)
        for i, image in enumerate(images):
            arr = np.asarray(image, dtype=np.float64)
            digest = hashlib.blake2b(
                struct.pack("<q", self.seed) + arr.astype("<f8").tobytes(),
                digest_size=8).digest()
            rng = np.random.default_rng(int.from_bytes(digest, "little"))
            base = rng.standard_normal(self.dim)
            base[0] += float(arr.mean())
            base[min(1, self.dim - 1)] += float(arr.std())
            rows[i] = base.astype(np.float32)
        return rows


class StubNextTokenSource:
    """Deterministic hash-walk over the vocabulary; greedy and repeatable."""

    def __init__(self, vocabulary: Sequence[str], seed: int = 0):
        self.vocabulary = list(vocabulary)
        self.seed = seed
        self.identifier = f"stub-lm-s{seed}"

    def top_m(self, context: str, m: int) -> list[str]:
        if m > len(self.vocabulary):
            raise ProviderError(f"cannot produce {m} distinct tokens from "
                                f"{len(self.vocabulary)}-entry vocabulary")
        digest = hashlib.blake2b(f"{self.seed}\x00{context}".encode("utf-8"),
                                 digest_size=8).digest()
        start = int.from_bytes(digest, "little") % len(self.vocabulary)
        return [self.vocabulary[(start + j) % len(self.vocabulary)] for j in range(m)]


def _require_local_dir(model_dir: Union[str, Path]) -> Path:
    p = Path(model_dir)
    if not p.is_dir():
        raise MissingAssets(f"model directory does not exist: {p}")
    return p


def _import_torch_transformers():
    try:
        import torch          # noqa: F401
        import transformers   # noqa: F401
        return torch, transformers
    except ImportError as exc:
        raise MissingAssets(f"torch/transformers unavailable: {exc}") from exc


class ClipTextProvider:
    """Text embeddings from a local CLIP text tower (projection output)."""

    def __init__(self, model_dir: Union[str, Path], device: str = "cpu"):
        path = _require_local_dir(model_dir)
        torch, transformers = _import_torch_transformers()
        self._torch = torch
        self.device = device
        try:
            self.tokenizer = transformers.AutoTokenizer.from_pretrained(
                str(path), local_files_only=True)
            self.model = transformers.CLIPTextModelWithProjection.from_pretrained(
                str(path), local_files_only=True).to(device).eval()
        except Exception as exc:
            raise MissingAssets(f"could not load CLIP text assets from {path}: {exc}") from exc
        self.dim = int(self.model.config.projection_dim)
        self.identifier = f"clip-text:{path.name}"

    def embed_texts(self, texts: Sequence[str], batch_size: int = 32) -> np.ndarray:
        torch = self._torch
        out = np.empty((len(texts), self.dim), dtype=np.float32)
        step = max(1, batch_size)
        with torch.no_grad():
            for start in range(0, len(texts), step):
                chunk = list(texts[start : start + step])
                enc = self.tokenizer(chunk, padding=True, truncation=True,
                                     return_tensors="pt").to(self.device)
                embeds = self.model(**enc).text_embeds
                out[start : start + step] = embeds.cpu().numpy().astype(np.float32)
        return out


class ClipImageProvider:
    """Image embeddings from a local CLIP vision tower (projection output)."""

    def __init__(self, model_dir: Union[str, Path], device: str = "cpu"):
        path = _require_local_dir(model_dir)
        torch, transformers = _import_torch_transformers()
        self._torch = torch
        self.device = device
        try:
            self.processor = transformers.AutoImageProcessor.from_pretrained(
                str(path), local_files_only=True)
            self.model = transformers.CLIPVisionModelWithProjection.from_pretrained(
                str(path), local_files_only=True).to(device).eval()
        except Exception as exc:
            raise MissingAssets(f"could not load CLIP vision assets from {path}: {exc}") from exc
        self.dim = int(self.model.config.projection_dim)
        self.identifier = f"clip-image:{path.name}"

    def embed_images(self, images: Sequence[np.ndarray], batch_size: int = 16) -> np.ndarray:
        torch = self._torch
        out = np.empty((len(images), self.dim), dtype=np.float32)
        step = max(1, batch_size)
        with torch.no_grad():
            for start in range(0, len(images), step):
                chunk = [np.moveaxis(np.asarray(im), 0, 2) for im in images[start : start + step]]
                enc = self.processor(images=chunk, return_tensors="pt").to(self.device)
                embeds = self.model(**enc).image_embeds
                out[start : start + step] = embeds.cpu().numpy().astype(np.float32)
        return out


class CausalLMNextTokenSource:
    """Greedy top-m continuations from a local causal language model."""

    def __init__(self, model_dir: Union[str, Path], device: str = "cpu"):
        path = _require_local_dir(model_dir)
        torch, transformers = _import_torch_transformers()
        self._torch = torch
        self.device = device
        try:
            self.tokenizer = transformers.AutoTokenizer.from_pretrained(
                str(path), local_files_only=True)
            self.model = transformers.AutoModelForCausalLM.from_pretrained(
                str(path), local_files_only=True).to(device).eval()
        except Exception as exc:
            raise MissingAssets(f"could not load language model from {path}: {exc}") from exc
        self.identifier = f"causal-lm:{path.name}"

    def top_m(self, context: str, m: int) -> list[str]:
        torch = self._torch
        with torch.no_grad():
            enc = self.tokenizer(context, return_tensors="pt").to(self.device)
            logits = self.model(**enc).logits[0, -1]
            ids = torch.topk(logits, m).indices.tolist()
        return [self.tokenizer.convert_ids_to_tokens(i) for i in ids]


def make_text_provider(spec: dict):
    kind = spec.get("kind", "stub")
    if kind == "stub":
        return StubTextProvider(dim=int(spec.get("dim", 16)), seed=int(spec.get("seed", 0)))
    if kind == "clip":
        if "model_dir" not in spec:
            raise ProviderError("clip text provider needs model_dir")
        return ClipTextProvider(spec["model_dir"], device=spec.get("device", "cpu"))
    raise ProviderError(f"unknown text provider kind {kind!r}")


def make_image_provider(spec: dict):
    kind = spec.get("kind", "stub")
    if kind == "stub":
        return StubImageProvider(dim=int(spec.get("dim", 16)), seed=int(spec.get("seed", 0)))
    if kind == "clip":
        if "model_dir" not in spec:
            raise ProviderError("clip image provider needs model_dir")
        return ClipImageProvider(spec["model_dir"], device=spec.get("device", "cpu"))
    raise ProviderError(f"unknown image provider kind {kind!r}")


def make_next_token_source(spec: dict, vocabulary: Sequence[str]):
    kind = spec.get("kind", "stub")
    if kind == "stub":
        return StubNextTokenSource(vocabulary, seed=int(spec.get("seed", 0)))
    if kind == "causal-lm":
        if "model_dir" not in spec:
            raise ProviderError("causal-lm source needs model_dir")
        return CausalLMNextTokenSource(spec["model_dir"], device=spec.get("device", "cpu"))
    raise ProviderError(f"unknown next-token source kind {kind!r}")
