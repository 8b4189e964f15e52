"""Deterministic prompt documents for the in-context tasks.

A PromptDoc is an ordered list of literal-text and token-reference
segments rendered once into a single string. Rendering rules, fixed so the
byte-level goldens stay stable:

* token references render as vocabulary strings joined by single spaces;
* top-level parts (instruction line, sample blocks, test stub) are joined
  by single spaces;
* classification samples are ``Input: <tokens>, output: <label>.``, caption
  samples ``Input: <tokens>, output: <caption>``, question samples
  ``Condition: <tokens>. Question: <q>. Answer: <a>``;
* the restoration instruction is ``Learn a new language and predict m
  tokens following the examples.`` with its examples rendered like
  classification samples.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .codebooks import ExpandedVocabulary, Vocabulary
from .model import TokenMap

__all__ = ["PromptDoc", "FewShotSpec", "PromptError",
           "build_classification_prompt", "build_caption_prompt",
           "build_vqa_prompt", "build_restoration_prompt",
           "run_classification", "run_caption", "run_vqa"]

AnyVocab = Union[Vocabulary, ExpandedVocabulary]


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class PromptDoc:
    """Segments plus their deterministic rendering."""

    segments: tuple[tuple, ...]
    rendered: str

    def __str__(self) -> str:
        return self.rendered


class _DocBuilder:
    def __init__(self, vocab: AnyVocab):
        self.vocab = vocab
        self.segments: list[tuple] = []
        self.parts: list[str] = []

    def text(self, s: str) -> None:
        self.segments.append(("text", s))
        self.parts.append(s)

    def tokens(self, ids: Sequence[int]) -> None:
        ids = tuple(int(i) for i in ids)
        self.segments.append(("tokens", ids))
        self.parts.append(" ".join(self.vocab.text(i) for i in ids))

    def done(self) -> PromptDoc:
        return PromptDoc(tuple(self.segments), "".join(self.parts))


@dataclass
class FewShotSpec:
    """Episode shape: N categories, K examples each, optional induction line,
    and per-sample block repetition. The rendered prompt carries
    N*K*(repetitions+1) sample blocks built from N*K supplied samples."""

    n_ways: int
    k_shots: int
    labels: tuple[str, ...]
    task_induction: bool = True
    repetitions: int = 0

    def __post_init__(self):
        self.labels = tuple(self.labels)
        if len(self.labels) != self.n_ways:
            raise PromptError(f"FewShotSpec: {len(self.labels)} labels for {self.n_ways} ways")
        if self.n_ways < 1 or self.k_shots < 0 or self.repetitions < 0:
            raise PromptError("FewShotSpec: negative episode shape")

    @property
    def sample_count(self) -> int:
        return self.n_ways * self.k_shots


def _global_ids(tm: TokenMap) -> np.ndarray:
    return tm.global_ids


def build_classification_prompt(
    spec: FewShotSpec,
    samples: Sequence[tuple[TokenMap, str]],
    test: TokenMap,
    vocab: AnyVocab,
) -> PromptDoc:
    """Few-shot category prompt over whole-image tokens."""
    if len(samples) != spec.sample_count:
        raise PromptError(f"expected {spec.sample_count} samples, got {len(samples)}")
    label_set = set(spec.labels)
    doc = _DocBuilder(vocab)
    lead = ""
    if spec.task_induction:
        listed = ", ".join(f'"{label}"' for label in spec.labels)
        doc.text(f"For each of the following input-output pairs, output is one of [{listed}].")
        lead = " "
    for tm, label in samples:
        if label not in label_set:
            raise PromptError(f"sample label {label!r} is not one of {spec.labels}")
        for _ in range(spec.repetitions + 1):
            doc.text(f"{lead}Input: ")
            doc.tokens(_global_ids(tm))
            doc.text(f", output: {label}.")
            lead = " "
    doc.text(f"{lead}Input: ")
    doc.tokens(_global_ids(test))
    doc.text(", output:")
    return doc.done()


def build_caption_prompt(
    samples: Sequence[tuple[TokenMap, str]],
    test: TokenMap,
    vocab: AnyVocab,
) -> PromptDoc:
    """Captioning prompt; generation downstream stops at the '.' token."""
    doc = _DocBuilder(vocab)
    doc.text("Generate a caption sentence based on words describing an image.")
    for tm, caption in samples:
        doc.text(" Input: ")
        doc.tokens(_global_ids(tm))
        doc.text(f", output: {caption}")
    doc.text(" Input: ")
    doc.tokens(_global_ids(test))
    doc.text(", output:")
    return doc.done()


def build_vqa_prompt(
    samples: Sequence[tuple[TokenMap, str, str]],
    test: TokenMap,
    question: str,
    vocab: AnyVocab,
) -> PromptDoc:
    """Question-answering prompt conditioned on whole-image tokens."""
    if not question:
        raise PromptError("vqa: question must be non-empty")
    doc = _DocBuilder(vocab)
    doc.text("Answer the question with a single word based on the condition.")
    for tm, q, a in samples:
        if not q:
            raise PromptError("vqa: sample question must be non-empty")
        doc.text(" Condition: ")
        doc.tokens(_global_ids(tm))
        doc.text(f". Question: {q}. Answer: {a}")
    doc.text(" Condition: ")
    doc.tokens(_global_ids(test))
    doc.text(f". Question: {question}. Answer:")
    return doc.done()


def build_restoration_prompt(
    examples: Sequence[tuple[Sequence[int], Sequence[int]]],
    query_context: Sequence[int],
    m: int,
    vocab: AnyVocab,
) -> PromptDoc:
    """Windowed token-prediction prompt with per-copy worked examples."""
    if m < 1:
        raise PromptError(f"restoration: m must be >= 1, got {m}")
    doc = _DocBuilder(vocab)
    doc.text(f"Learn a new language and predict {m} tokens following the examples.")
    for ctx, tgt in examples:
        doc.text(" Input: ")
        doc.tokens(ctx)
        doc.text(", output: ")
        doc.tokens(tgt)
        doc.text(".")
    doc.text(" Input: ")
    doc.tokens(query_context)
    doc.text(", output:")
    return doc.done()


# ---------------------------------------------------------------------------
# thin task runners (prompt -> backend -> normalized answer)
# ---------------------------------------------------------------------------


def _normalize_answer(text: str) -> str:
    out = text.strip()
    if out.endswith("."):
        out = out[:-1].rstrip()
    return out


def run_classification(spec, samples, test, vocab, backend, max_tokens: int = 8) -> str:
    prompt = build_classification_prompt(spec, samples, test, vocab)
    return _normalize_answer(backend.complete(prompt.rendered, max_tokens=max_tokens, stop="."))


def run_caption(samples, test, vocab, backend, max_tokens: int = 32) -> str:
    prompt = build_caption_prompt(samples, test, vocab)
    return backend.complete(prompt.rendered, max_tokens=max_tokens, stop=".").strip()


def run_vqa(samples, test, question, vocab, backend, max_tokens: int = 8) -> str:
    prompt = build_vqa_prompt(samples, test, question, vocab)
    return _normalize_answer(backend.complete(prompt.rendered, max_tokens=max_tokens, stop="."))
