"""Writers for the V2LE embedding container and the next-token table.

The container layout (little-endian): magic "V2LE", version u16, flags u16
(0 plain vocabulary, 1 expanded), entry count u64, dim u32, per-entry
records (u32 text length + UTF-8 text; expanded entries append u8 arity
and arity x u32 source ids), the row-major float32 payload, and an 8-byte
BLAKE2b checksum of the payload. Writes are atomic (temp file + rename)
and each export drops a provenance sidecar JSON next to its output.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

MAGIC = b"V2LE"
FORMAT_VERSION = 1
FLAG_PLAIN = 0
FLAG_EXPANDED = 1


class ExportFormatError(ValueError):
    pass


def payload_checksum(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def write_embedding_file(
    path: Union[str, Path],
    entries: Sequence[str],
    matrix: np.ndarray,
    expanded_meta: Optional[Sequence[tuple[int, Sequence[int]]]] = None,
    provenance: Optional[dict] = None,
) -> None:
    """Write entry strings and their float32 rows; optionally expanded-flavor.

    ``expanded_meta`` supplies (arity, source_ids) per entry and switches the
    file to the expanded-vocabulary flavor.
    """
    rows = np.ascontiguousarray(matrix, dtype="<f4")
    if rows.ndim != 2:
        raise ExportFormatError(f"matrix must be 2-D, got shape {rows.shape}")
    if rows.shape[0] != len(entries):
        raise ExportFormatError(f"{rows.shape[0]} rows for {len(entries)} entries")
    if rows.shape[1] == 0:
        raise ExportFormatError("embedding dimension is zero")
    if not np.isfinite(rows).all():
        raise ExportFormatError("matrix contains non-finite values")
    if expanded_meta is not None and len(expanded_meta) != len(entries):
        raise ExportFormatError("expanded metadata length does not match entries")

    flags = FLAG_EXPANDED if expanded_meta is not None else FLAG_PLAIN
    parts = [MAGIC, struct.pack("<HHQI", FORMAT_VERSION, flags, len(entries), rows.shape[1])]
    for i, text in enumerate(entries):
        raw = text.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        if expanded_meta is not None:
            arity, sources = expanded_meta[i]
            if arity not in (1, 2, 3) or len(sources) != arity:
                raise ExportFormatError(f"entry {i}: invalid arity metadata")
            parts.append(struct.pack("<B", arity))
            parts.append(struct.pack(f"<{arity}I", *sources))
    payload = rows.tobytes()
    parts.append(payload)
    parts.append(struct.pack("<Q", payload_checksum(payload)))

    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = target.with_name(target.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(target)
    if provenance is not None:
        sidecar = target.with_name(target.name + ".provenance.json")
        sidecar.write_text(json.dumps(provenance, indent=2, sort_keys=True), encoding="utf-8")


def write_next_token_table(
    path: Union[str, Path],
    prefix: str,
    m: int,
    table: dict[str, list[str]],
    provenance: Optional[dict] = None,
) -> None:
    """Write the context -> top-m continuations table consumed by expansion."""
    for context, tokens in table.items():
        if len(tokens) != m:
            raise ExportFormatError(f"context {context!r} has {len(tokens)} tokens, expected {m}")
    doc = {"prefix": prefix, "m": m, "table": table}
    if provenance is not None:
        doc["provenance"] = provenance
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = target.with_name(target.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")
    tmp.replace(target)
