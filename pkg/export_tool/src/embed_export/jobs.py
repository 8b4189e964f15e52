"""Export jobs: parse the job file, run the three export flavors."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .format import write_embedding_file, write_next_token_table
from .providers import make_image_provider, make_next_token_source, make_text_provider
from .vocab import load_vocabulary

DEFAULT_PREFIX = "a photo of"


class JobError(ValueError):
    pass


@dataclass
class ExportJob:
    """One export task read from a JSON job file."""

    kind: str                       # vocab-embeddings | image-features | next-token-table
    output: Path
    vocab_source: Optional[Path] = None
    image_dir: Optional[Path] = None
    provider: dict = field(default_factory=dict)
    batch_size: int = 32
    device: str = "cpu"
    prefix: str = DEFAULT_PREFIX
    top_m: int = 1

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ExportJob":
        p = Path(path)
        try:
            doc = json.loads(p.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise JobError(f"job file not found: {p}") from None
        except json.JSONDecodeError as exc:
            raise JobError(f"job file {p} is not valid JSON: {exc}") from None
        allowed = {"kind", "output", "vocab_source", "image_dir", "provider",
                   "batch_size", "device", "prefix", "top_m"}
        unknown = set(doc) - allowed
        if unknown:
            raise JobError(f"unknown job keys: {sorted(unknown)}")
        if "kind" not in doc or "output" not in doc:
            raise JobError("job file needs 'kind' and 'output'")
        base = p.parent

        def resolve(key):
            if key not in doc or doc[key] is None:
                return None
            q = Path(doc[key])
            return q if q.is_absolute() else base / q

        job = cls(
            kind=doc["kind"],
            output=resolve("output"),
            vocab_source=resolve("vocab_source"),
            image_dir=resolve("image_dir"),
            provider=dict(doc.get("provider", {})),
            batch_size=int(doc.get("batch_size", 32)),
            device=str(doc.get("device", "cpu")),
            prefix=str(doc.get("prefix", DEFAULT_PREFIX)),
            top_m=int(doc.get("top_m", 1)),
        )
        if job.kind not in ("vocab-embeddings", "image-features", "next-token-table"):
            raise JobError(f"unknown job kind {job.kind!r}")
        if job.top_m < 1:
            raise JobError("top_m must be >= 1")
        return job


def _provider_spec(job: ExportJob) -> dict:
    spec = dict(job.provider)
    spec.setdefault("device", job.device)
    return spec


def run_vocab_embeddings(job: ExportJob) -> int:
    if job.vocab_source is None:
        raise JobError("vocab-embeddings job needs vocab_source")
    tokens = load_vocabulary(job.vocab_source)
    provider = make_text_provider(_provider_spec(job))
    matrix = provider.embed_texts(tokens, batch_size=job.batch_size)
    write_embedding_file(job.output, tokens, matrix, provenance={
        "kind": "vocab-embeddings",
        "provider": provider.identifier,
        "vocab_source": str(job.vocab_source),
        "entries": len(tokens),
        "dim": int(matrix.shape[1]),
    })
    return len(tokens)


def _read_rimg(path: Path) -> np.ndarray:
    blob = path.read_bytes()
    if blob[:4] != b"RIMG":
        raise JobError(f"{path}: not a raw image file")
    h, w, c = struct.unpack("<III", blob[4:16])
    if len(blob) != 16 + h * w * c:
        raise JobError(f"{path}: truncated image payload")
    raw = np.frombuffer(blob, dtype=np.uint8, offset=16).reshape(h, w, c)
    return np.moveaxis(raw, 2, 0).astype(np.float64) / 255.0


def _load_image(path: Path) -> np.ndarray:
    if path.suffix == ".rimg":
        return _read_rimg(path)
    try:
        from PIL import Image
    except ImportError:
        raise JobError(f"{path}: only .rimg images supported without Pillow") from None
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return np.moveaxis(arr, 2, 0)


def run_image_features(job: ExportJob) -> int:
    if job.image_dir is None:
        raise JobError("image-features job needs image_dir")
    if not job.image_dir.is_dir():
        raise JobError(f"image directory does not exist: {job.image_dir}")
    paths = sorted(p for p in job.image_dir.iterdir()
                   if p.suffix.lower() in (".rimg", ".png", ".jpg", ".jpeg", ".bmp"))
    if not paths:
        raise JobError(f"no images found in {job.image_dir}")
    stems = [p.stem for p in paths]
    if len(set(stems)) != len(stems):
        raise JobError(f"{job.image_dir}: duplicate image stems")
    provider = make_image_provider(_provider_spec(job))
    matrix = provider.embed_images([_load_image(p) for p in paths], batch_size=job.batch_size)
    write_embedding_file(job.output, stems, matrix, provenance={
        "kind": "image-features",
        "provider": provider.identifier,
        "image_dir": str(job.image_dir),
        "entries": len(stems),
        "dim": int(matrix.shape[1]),
    })
    return len(stems)


def run_next_token_table(job: ExportJob) -> int:
    """Record top-m continuations for every token and every induced bigram.

    Bigram contexts follow from the token-level predictions, so the table
    covers exactly the contexts a trigram expansion will query.
    """
    if job.vocab_source is None:
        raise JobError("next-token-table job needs vocab_source")
    tokens = load_vocabulary(job.vocab_source)
    source = make_next_token_source(_provider_spec(job), tokens)
    m = job.top_m
    table: dict[str, list[str]] = {}
    bigrams: list[str] = []
    for token in tokens:
        context = f"{job.prefix} {token}"
        preds = source.top_m(context, m)
        table[context] = preds
        bigrams.extend(f"{token} {p}" for p in preds)
    for bigram in bigrams:
        context = f"{job.prefix} {bigram}"
        if context not in table:
            table[context] = source.top_m(context, m)
    write_next_token_table(job.output, job.prefix, m, table, provenance={
        "kind": "next-token-table",
        "provider": source.identifier,
        "vocab_source": str(job.vocab_source),
        "contexts": len(table),
    })
    return len(table)


def run_job(job: ExportJob) -> int:
    if job.kind == "vocab-embeddings":
        return run_vocab_embeddings(job)
    if job.kind == "image-features":
        return run_image_features(job)
    return run_next_token_table(job)
