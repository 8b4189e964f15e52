"""Vocabularies, n-gram expansion, similarity filtering, and embedding files.

The local codebook is a plain vocabulary of token strings. The global
codebook starts from the same vocabulary, is expanded with bigrams and
trigrams proposed by a next-token predictor, and is then filtered down to
the entries that score in some image's top-k by cosine similarity.

Embedding tables are stored on disk in the "V2LE" container: magic,
version (u16), flags (u16, 0 = plain vocabulary, 1 = expanded vocabulary),
entry count (u64), dim (u32), length-prefixed UTF-8 entry records, a
row-major little-endian float32 payload, and an 8-byte BLAKE2b checksum of
the payload. Expanded entry records append arity (u8) and the source token
ids (arity x u32) after the text.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence, Union

import numpy as np

__all__ = [
    "Vocabulary",
    "ExpandedEntry",
    "ExpandedVocabulary",
    "EmbeddingTable",
    "NextTokenPredictor",
    "TablePredictor",
    "ConstantPredictor",
    "PredictorError",
    "EmbeddingFileError",
    "ChecksumError",
    "render_ngram",
    "expand_vocabulary",
    "filter_expanded",
    "save_embeddings",
    "load_embeddings",
]

MAGIC = b"V2LE"
FORMAT_VERSION = 1
FLAG_PLAIN = 0
FLAG_EXPANDED = 1
DEFAULT_PREFIX = "a photo of"


class EmbeddingFileError(ValueError):
    """Malformed, truncated, or inconsistent embedding file."""


class ChecksumError(EmbeddingFileError):
    """Payload bytes do not match the stored checksum."""


class PredictorError(RuntimeError):
    """The next-token predictor failed or returned an invalid continuation."""


@dataclass(frozen=True)
class Vocabulary:
    """Unique token strings; the entry index is the token id."""

    entries: tuple[str, ...]

    def __post_init__(self):
        if not self.entries:
            raise ValueError("Vocabulary: must contain at least one entry")
        if len(set(self.entries)) != len(self.entries):
            raise ValueError("Vocabulary: entries must be unique")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.entries)})

    def __len__(self) -> int:
        return len(self.entries)

    def text(self, token_id: int) -> str:
        return self.entries[token_id]

    def id_of(self, text: str) -> int:
        return self._index[text]

    def __contains__(self, text: str) -> bool:
        return text in self._index


@dataclass(frozen=True)
class ExpandedEntry:
    text: str
    arity: int
    source_ids: tuple[int, ...]

    def __post_init__(self):
        if self.arity not in (1, 2, 3):
            raise ValueError(f"ExpandedEntry: arity must be 1, 2 or 3, got {self.arity}")
        if len(self.source_ids) != self.arity:
            raise ValueError("ExpandedEntry: source id count must equal arity")


@dataclass(frozen=True)
class ExpandedVocabulary:
    """Unigrams, bigrams, and trigrams with provenance.

    A freshly expanded vocabulary contains the full base vocabulary as its
    arity-1 entries plus N*M bigrams and N*M^2 trigrams; filtered instances
    carry an arbitrary subset in first-appearance order.
    """

    entries: tuple[ExpandedEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)

    def text(self, entry_id: int) -> str:
        return self.entries[entry_id].text

    def texts(self) -> list[str]:
        return [e.text for e in self.entries]

    def counts_by_arity(self) -> dict[int, int]:
        counts = {1: 0, 2: 0, 3: 0}
        for e in self.entries:
            counts[e.arity] += 1
        return counts


def render_ngram(parts: Sequence[str]) -> str:
    """Canonical n-gram text: source tokens joined by a single space."""
    return " ".join(parts)


class NextTokenPredictor(Protocol):
    """Supplies the top-m next tokens for a text context."""

    prefix: str

    def predict(self, context: str, m: int) -> list[str]: ...


@dataclass
class TablePredictor:
    """Deterministic predictor backed by a context -> continuations table."""

    table: dict[str, list[str]]
    prefix: str = DEFAULT_PREFIX

    def predict(self, context: str, m: int) -> list[str]:
        try:
            preds = self.table[context]
        except KeyError:
            raise PredictorError(f"no prediction recorded for context {context!r}") from None
        if len(preds) < m:
            raise PredictorError(f"context {context!r} has {len(preds)} predictions, need {m}")
        return list(preds[:m])

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> "TablePredictor":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(table={k: list(v) for k, v in doc["table"].items()},
                   prefix=doc.get("prefix", DEFAULT_PREFIX))


@dataclass
class ConstantPredictor:
    """Always proposes the same continuations; handy in tests."""

    tokens: tuple[str, ...]
    prefix: str = DEFAULT_PREFIX

    def predict(self, context: str, m: int) -> list[str]:
        if len(self.tokens) < m:
            raise PredictorError(f"constant predictor holds {len(self.tokens)} tokens, need {m}")
        return list(self.tokens[:m])


def expand_vocabulary(base: Vocabulary, predictor: NextTokenPredictor, m: int = 1) -> ExpandedVocabulary:
    """Grow a vocabulary with predictor-proposed bigrams and trigrams.

    Every base token contributes m bigrams (token followed by each of the
    predictor's top-m continuations after ``prefix + token``) and each
    bigram contributes m trigrams the same way, giving N(1 + m + m^2)
    entries. Any predictor failure aborts the expansion.
    """
    if m < 1:
        raise ValueError(f"expand_vocabulary: m must be >= 1, got {m}")
    prefix = predictor.prefix

    def continuations(text: str) -> list[int]:
        preds = predictor.predict(f"{prefix} {text}", m)
        if len(set(preds)) != m:
            raise PredictorError(f"predictor returned {len(set(preds))} distinct tokens "
                                 f"for context {text!r}, need {m}")
        ids = []
        for tok in preds:
            if tok not in base:
                raise PredictorError(f"predicted continuation {tok!r} is not in the base vocabulary")
            ids.append(base.id_of(tok))
        return ids

    entries: list[ExpandedEntry] = [
        ExpandedEntry(text, 1, (i,)) for i, text in enumerate(base.entries)
    ]
    bigrams: list[ExpandedEntry] = []
    for i, text in enumerate(base.entries):
        for j in continuations(text):
            bigrams.append(ExpandedEntry(render_ngram((text, base.text(j))), 2, (i, j)))
    trigrams: list[ExpandedEntry] = []
    for bg in bigrams:
        for j in continuations(bg.text):
            trigrams.append(ExpandedEntry(render_ngram((bg.text, base.text(j))), 3, bg.source_ids + (j,)))
    return ExpandedVocabulary(tuple(entries + bigrams + trigrams))


# ---------------------------------------------------------------------------
# embedding tables
# ---------------------------------------------------------------------------


@dataclass
class EmbeddingTable:
    """A (rows x dim) float matrix, one row per vocabulary entry.

    Frozen tables are write-protected and never change after load; this is
    what keeps codebooks out of the training graph.
    """

    matrix: np.ndarray
    frozen: bool = True

    def __post_init__(self):
        m = np.asarray(self.matrix)
        if m.ndim != 2:
            raise ValueError(f"EmbeddingTable: matrix must be 2-D, got shape {m.shape}")
        if not np.isfinite(m).all():
            raise ValueError("EmbeddingTable: matrix contains non-finite values")
        self.matrix = m
        if self.frozen:
            self.matrix.setflags(write=False)

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def as_f64(self) -> np.ndarray:
        return np.asarray(self.matrix, dtype=np.float64)


def _cosine_similarities(images: np.ndarray, entries: np.ndarray) -> np.ndarray:
    im = np.asarray(images, dtype=np.float64)
    en = np.asarray(entries, dtype=np.float64)
    im_n = im / np.maximum(np.linalg.norm(im, axis=1, keepdims=True), 1e-300)
    en_n = en / np.maximum(np.linalg.norm(en, axis=1, keepdims=True), 1e-300)
    return im_n @ en_n.T


def filter_expanded(
    expanded: ExpandedVocabulary,
    text_embeddings: EmbeddingTable,
    image_embeddings: EmbeddingTable,
    top_k: int = 5,
) -> tuple[ExpandedVocabulary, EmbeddingTable, list[int]]:
    """Keep entries that land in some image's top-k by cosine similarity.

    Per image the k most similar entries are recorded (ties to the lower
    entry index); the result is their union in first-appearance order.
    Returns the filtered vocabulary, its embedding rows, and the kept
    indices into the input vocabulary.
    """
    if text_embeddings.rows != len(expanded):
        raise ValueError(f"filter_expanded: {text_embeddings.rows} embedding rows for "
                         f"{len(expanded)} vocabulary entries")
    if text_embeddings.dim != image_embeddings.dim:
        raise ValueError(f"filter_expanded: text dim {text_embeddings.dim} does not match "
                         f"image dim {image_embeddings.dim}")
    if image_embeddings.rows == 0:
        raise ValueError("filter_expanded: need at least one image embedding")
    if not 1 <= top_k <= text_embeddings.rows:
        raise ValueError(f"filter_expanded: top_k {top_k} out of range")

    sims = _cosine_similarities(image_embeddings.matrix, text_embeddings.matrix)
    kept: list[int] = []
    seen: set[int] = set()
    col_ids = np.arange(sims.shape[1])
    for row in sims:
        # smallest (-sim, index) pairs == highest similarity, ties to low index
        order = np.lexsort((col_ids, -row))[:top_k]
        for idx in order:
            i = int(idx)
            if i not in seen:
                seen.add(i)
                kept.append(i)
    vocab = ExpandedVocabulary(tuple(expanded.entries[i] for i in kept))
    table = EmbeddingTable(np.array(text_embeddings.matrix[kept]), frozen=True)
    return vocab, table, kept


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------


def _payload_checksum(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def save_embeddings(
    vocab: Union[Vocabulary, ExpandedVocabulary],
    table: EmbeddingTable,
    path: Union[str, Path],
) -> None:
    """Write a vocabulary and its embedding table as a V2LE file."""
    expanded = isinstance(vocab, ExpandedVocabulary)
    count = len(vocab)
    if table.rows != count:
        raise ValueError(f"save_embeddings: table has {table.rows} rows for {count} entries")
    payload = np.ascontiguousarray(table.matrix, dtype="<f4").tobytes()

    parts = [MAGIC,
             struct.pack("<HHQI", FORMAT_VERSION, FLAG_EXPANDED if expanded else FLAG_PLAIN,
                         count, table.dim)]
    if expanded:
        for e in vocab.entries:
            raw = e.text.encode("utf-8")
            parts.append(struct.pack("<I", len(raw)))
            parts.append(raw)
            parts.append(struct.pack("<B", e.arity))
            parts.append(struct.pack(f"<{e.arity}I", *e.source_ids))
    else:
        for text in vocab.entries:
            raw = text.encode("utf-8")
            parts.append(struct.pack("<I", len(raw)))
            parts.append(raw)
    parts.append(payload)
    parts.append(struct.pack("<Q", _payload_checksum(payload)))

    target = Path(path)
    tmp = target.with_name(target.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(target)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise EmbeddingFileError("truncated embedding file")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_embeddings(path: Union[str, Path]) -> tuple[Union[Vocabulary, ExpandedVocabulary], EmbeddingTable]:
    """Read a V2LE file, verifying structure and payload checksum."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise EmbeddingFileError(f"{path}: bad magic, not an embedding file")
    version, flags, count, dim = r.unpack("<HHQI")
    if version != FORMAT_VERSION:
        raise EmbeddingFileError(f"{path}: unsupported version {version}")
    if flags not in (FLAG_PLAIN, FLAG_EXPANDED):
        raise EmbeddingFileError(f"{path}: unknown flags {flags}")
    if dim == 0:
        raise EmbeddingFileError(f"{path}: dimension is zero")

    vocab: Union[Vocabulary, ExpandedVocabulary]
    if flags == FLAG_EXPANDED:
        entries = []
        for _ in range(count):
            (tlen,) = r.unpack("<I")
            text = r.take(tlen).decode("utf-8")
            (arity,) = r.unpack("<B")
            if arity not in (1, 2, 3):
                raise EmbeddingFileError(f"{path}: invalid entry arity {arity}")
            ids = r.unpack(f"<{arity}I")
            entries.append(ExpandedEntry(text, arity, tuple(int(i) for i in ids)))
        vocab = ExpandedVocabulary(tuple(entries))
    else:
        texts = []
        for _ in range(count):
            (tlen,) = r.unpack("<I")
            texts.append(r.take(tlen).decode("utf-8"))
        vocab = Vocabulary(tuple(texts))

    payload = r.take(count * dim * 4)
    (stored,) = r.unpack("<Q")
    if r.pos != len(r.blob):
        raise EmbeddingFileError(f"{path}: trailing bytes after checksum")
    if _payload_checksum(payload) != stored:
        raise ChecksumError(f"{path}: payload checksum mismatch")
    matrix = np.frombuffer(payload, dtype="<f4").reshape(count, dim).astype(np.float32)
    return vocab, EmbeddingTable(matrix, frozen=True)
