"""Vocabulary extraction from local tokenizer assets.

Supported sources, detected by filename:
* ``*.txt`` — one token per line, in id order;
* ``vocab.json`` — a token -> id mapping;
* ``tokenizer.json`` — a fast-tokenizer bundle with model.vocab inside.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Union


class VocabSourceError(ValueError):
    pass


def load_vocabulary(path: Union[str, Path]) -> list[str]:
    p = Path(path)
    if not p.exists():
        raise VocabSourceError(f"vocabulary source does not exist: {p}")
    if p.suffix == ".txt":
        tokens = p.read_text(encoding="utf-8").splitlines()
        tokens = [t for t in tokens if t]
    elif p.name == "vocab.json" or p.suffix == ".json" and p.name != "tokenizer.json":
        mapping = json.loads(p.read_text(encoding="utf-8"))
        if not isinstance(mapping, dict):
            raise VocabSourceError(f"{p}: expected a token -> id object")
        tokens = [None] * len(mapping)
        for token, idx in mapping.items():
            if not isinstance(idx, int) or not 0 <= idx < len(mapping):
                raise VocabSourceError(f"{p}: id {idx!r} for token {token!r} out of range")
            tokens[idx] = token
        if any(t is None for t in tokens):
            raise VocabSourceError(f"{p}: vocabulary ids are not contiguous")
    elif p.name == "tokenizer.json":
        doc = json.loads(p.read_text(encoding="utf-8"))
        try:
            mapping = doc["model"]["vocab"]
        except (KeyError, TypeError):
            raise VocabSourceError(f"{p}: no model.vocab section") from None
        tokens = [None] * len(mapping)
        for token, idx in mapping.items():
            tokens[idx] = token
        if any(t is None for t in tokens):
            raise VocabSourceError(f"{p}: vocabulary ids are not contiguous")
    else:
        raise VocabSourceError(f"unrecognized vocabulary source: {p}")
    if not tokens:
        raise VocabSourceError(f"{p}: empty vocabulary")
    if len(set(tokens)) != len(tokens):
        raise VocabSourceError(f"{p}: duplicate tokens in vocabulary")
    return tokens
