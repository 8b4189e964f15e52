"""Run configuration: strict JSON schema, seed derivation, object builders.

The config file is the source of truth for every command; unknown keys are
rejected rather than ignored. All randomness derives from the single
top-level seed, split per stage through a fixed spawn-key table.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from .backends import EchoBackend, HTTPBackend, OracleBackend, ScriptedBackend
from .codebooks import EmbeddingTable, ExpandedVocabulary, Vocabulary, load_embeddings
from .globalfeat import FileGlobalFeatures, ToyGlobalFeatures
from .model import ModelConfig, TokenizerModel
from .training import TrainConfig

__all__ = ["RunConfig", "ConfigError", "stage_seed", "stage_rng", "STAGES",
           "HashedTextEmbedder", "FileTextEmbedder"]

# documented once here: every stage draws from SeedSequence(seed, spawn_key=(index,))
STAGES = {
    "model_init": 0,
    "train": 1,
    "tokenize": 2,
    "task": 3,
    "fixtures": 4,
    "embedder": 5,
}

ENV_ENDPOINT = "VISLANG_ENDPOINT"
ENV_AUTH_TOKEN = "VISLANG_AUTH_TOKEN"
ENV_TIMEOUT = "VISLANG_TIMEOUT"


class ConfigError(ValueError):
    pass


def stage_seed(seed: int, stage: str) -> int:
    try:
        key = STAGES[stage]
    except KeyError:
        raise ConfigError(f"unknown seed stage {stage!r}") from None
    return int(np.random.SeedSequence(seed, spawn_key=(key,)).generate_state(1)[0])


def stage_rng(seed: int, stage: str) -> np.random.Generator:
    return np.random.default_rng(stage_seed(seed, stage))


_SCHEMA: dict[str, Any] = {
    "seed": int,
    "model": {
        "image_size": int, "base_channels": list, "width_divisor": int,
        "d_local": int, "global_dim": int, "k_global": int, "activation": str,
    },
    "train": {
        "epochs": int, "batch_size": int, "base_lr": float, "warmup_epochs": int,
        "beta": float, "lambda_perceptual": float, "lambda_gan": float,
        "checkpoint_every": int,
    },
    "paths": {
        "local_codebook": str, "global_codebook": str, "checkpoint": str,
        "dataset_dir": str, "output_dir": str, "global_features": str,
    },
    "expand": {
        "m": int, "predictor_table": str, "output": str,
        "embedder": {"kind": str, "dim": int, "seed": int, "path": str},
    },
    "filter": {"expanded": str, "image_embeddings": str, "top_k": int, "output": str},
    "backend": {
        "kind": str, "endpoint": str, "model": str, "timeout": float,
        "responses": str, "text": str, "answers": str,
    },
    "task": {
        "kind": str, "copies": int, "context_len": int, "stride": int,
        "ratio_start": float, "ratio_step": float,
        "token_map": str, "reference_map": str, "episodes": str,
        "rotate_turns": int, "shift_x": int, "shift_y": int,
    },
}


def _check_keys(doc: dict, schema: dict, path: str) -> None:
    for key, value in doc.items():
        if key not in schema:
            raise ConfigError(f"unknown config key {path}{key!r}")
        expected = schema[key]
        if isinstance(expected, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path}{key!r} must be an object")
            _check_keys(value, expected, f"{path}{key}.")
        elif expected is float:
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"config key {path}{key!r} must be a number")
        elif expected is int:
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"config key {path}{key!r} must be an integer")
        elif expected is str:
            if not isinstance(value, str):
                raise ConfigError(f"config key {path}{key!r} must be a string")
        elif expected is list:
            if not isinstance(value, list):
                raise ConfigError(f"config key {path}{key!r} must be a list")


@dataclass
class RunConfig:
    """Parsed and validated configuration for one pipeline run."""

    seed: int
    model: ModelConfig
    train: TrainConfig
    paths: dict[str, str]
    expand: dict
    filter: dict
    backend: dict
    task: dict
    base_dir: Path = field(default_factory=Path)

    @classmethod
    def load(cls, path: Union[str, Path], overrides: Optional[dict] = None) -> "RunConfig":
        p = Path(path)
        try:
            doc = json.loads(p.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {p}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {p} is not valid JSON: {exc}") from None
        if overrides:
            doc = _merge(doc, overrides)
        return cls.from_dict(doc, base_dir=p.parent)

    @classmethod
    def from_dict(cls, doc: dict, base_dir: Union[str, Path] = ".") -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config root must be an object")
        _check_keys(doc, _SCHEMA, "")
        if "seed" not in doc:
            raise ConfigError("config must set an explicit seed")
        model = ModelConfig.from_dict({**ModelConfig().to_dict(), **doc.get("model", {})})
        train_doc = {**TrainConfig().to_dict(), **doc.get("train", {})}
        train_doc["seed"] = stage_seed(doc["seed"], "train")
        train = TrainConfig.from_dict(train_doc)
        return cls(
            seed=int(doc["seed"]),
            model=model,
            train=train,
            paths=dict(doc.get("paths", {})),
            expand=dict(doc.get("expand", {})),
            filter=dict(doc.get("filter", {})),
            backend=dict(doc.get("backend", {})),
            task=dict(doc.get("task", {})),
            base_dir=Path(base_dir),
        )

    # -- path handling -------------------------------------------------

    def resolve(self, value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def require_path(self, section: dict, key: str, what: str, must_exist: bool = True) -> Path:
        if key not in section:
            raise ConfigError(f"config is missing {what} ({key!r})")
        p = self.resolve(section[key])
        if must_exist and not p.exists():
            raise ConfigError(f"{what} does not exist: {p}")
        return p

    def output_dir(self) -> Path:
        out = self.resolve(self.paths.get("output_dir", "out"))
        out.mkdir(parents=True, exist_ok=True)
        return out

    # -- builders --------------------------------------------------------

    def load_local_codebook(self) -> tuple[Vocabulary, EmbeddingTable]:
        path = self.require_path(self.paths, "local_codebook", "local codebook file")
        vocab, table = load_embeddings(path)
        if not isinstance(vocab, Vocabulary):
            raise ConfigError(f"{path}: local codebook must use the plain vocabulary flavor")
        return vocab, table

    def load_global_codebook(self) -> tuple[ExpandedVocabulary, EmbeddingTable]:
        path = self.require_path(self.paths, "global_codebook", "global codebook file")
        vocab, table = load_embeddings(path)
        if not isinstance(vocab, ExpandedVocabulary):
            raise ConfigError(f"{path}: global codebook must use the expanded vocabulary flavor")
        return vocab, table

    def build_global_features(self):
        if self.paths.get("global_features"):
            path = self.require_path(self.paths, "global_features", "global feature file")
            return FileGlobalFeatures.from_file(path)
        return ToyGlobalFeatures(dim=self.model.global_dim)

    def build_model(self) -> TokenizerModel:
        local_vocab, local_table = self.load_local_codebook()
        global_vocab, global_table = self.load_global_codebook()
        return TokenizerModel(
            self.model, local_vocab, local_table, global_vocab, global_table,
            self.build_global_features(), seed=stage_seed(self.seed, "model_init"),
        )

    def build_backend(self):
        kind = self.backend.get("kind", "http")
        if kind == "http":
            endpoint = os.environ.get(ENV_ENDPOINT) or self.backend.get("endpoint")
            if not endpoint:
                raise ConfigError(f"http backend needs an endpoint (config backend.endpoint "
                                  f"or ${ENV_ENDPOINT})")
            timeout = float(os.environ.get(ENV_TIMEOUT) or self.backend.get("timeout", 30.0))
            return HTTPBackend(endpoint, model=self.backend.get("model", "default"),
                               auth_token=os.environ.get(ENV_AUTH_TOKEN), timeout=timeout)
        if kind == "scripted":
            path = self.require_path(self.backend, "responses", "scripted responses file")
            doc = json.loads(path.read_text(encoding="utf-8"))
            return ScriptedBackend(responses=dict(doc.get("responses", {})),
                                   default=doc.get("default"))
        if kind == "echo":
            if "text" not in self.backend:
                raise ConfigError("echo backend needs backend.text")
            return EchoBackend(self.backend["text"])
        if kind == "oracle":
            path = self.require_path(self.backend, "answers", "oracle answers file")
            return OracleBackend(json.loads(path.read_text(encoding="utf-8")))
        raise ConfigError(f"unknown backend kind {kind!r}")


def _merge(base: dict, overrides: dict) -> dict:
    out = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


# ---------------------------------------------------------------------------
# text embedders for vocabulary expansion at desk scale
# ---------------------------------------------------------------------------


class HashedTextEmbedder:
    """Deterministic per-text embedding: a seeded draw keyed by the text hash.

    A synthetic stand-in for a real text encoder so the desk pipeline runs
    without model assets.
    """

    def __init__(self, dim: int, seed: int = 0):
        if dim < 1:
            raise ConfigError("hashed embedder: dim must be >= 1")
        self.dim = dim
        self.seed = seed

    def embed(self, texts) -> np.ndarray:
        rows = np.empty((len(texts), self.dim), dtype=np.float32)
        for i, text in enumerate(texts):
            digest = hashlib.blake2b(f"{self.seed}\x00{text}".encode("utf-8"),
                                     digest_size=8).digest()
            rng = np.random.default_rng(int.from_bytes(digest, "little"))
            rows[i] = rng.standard_normal(self.dim).astype(np.float32)
        return rows


class FileTextEmbedder:
    """Embeddings looked up by entry text from an existing embedding file."""

    def __init__(self, path: Union[str, Path]):
        vocab, table = load_embeddings(path)
        texts = vocab.entries if isinstance(vocab, Vocabulary) else tuple(vocab.texts())
        self._rows = {t: table.matrix[i] for i, t in enumerate(texts)}
        self.dim = table.dim

    def embed(self, texts) -> np.ndarray:
        rows = np.empty((len(texts), self.dim), dtype=np.float32)
        for i, text in enumerate(texts):
            try:
                rows[i] = self._rows[text]
            except KeyError:
                raise ConfigError(f"embedding file has no row for text {text!r}") from None
        return rows


def build_text_embedder(cfg: RunConfig):
    emb = cfg.expand.get("embedder", {"kind": "hashed", "dim": 16})
    kind = emb.get("kind", "hashed")
    if kind == "hashed":
        return HashedTextEmbedder(dim=int(emb.get("dim", 16)),
                                  seed=stage_seed(cfg.seed, "embedder"))
    if kind == "file":
        if "path" not in emb:
            raise ConfigError("file embedder needs expand.embedder.path")
        return FileTextEmbedder(cfg.resolve(emb["path"]))
    raise ConfigError(f"unknown embedder kind {kind!r}")
