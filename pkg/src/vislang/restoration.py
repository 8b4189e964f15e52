"""Token-map corruption schedules and windowed restoration protocols.

All window arithmetic runs over the row-major flattening of the local
grid. Masked positions are filled in raster order, ``stride`` at a time,
each call conditioned on the ``context_len`` tokens immediately preceding
the chunk (left-truncated near the start, with earlier predictions already
substituted). Map-translation tasks slide a non-overlapping output window
of ``stride`` tokens whose call context is the ``context_len + stride``
polluted tokens ending at the window.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .codebooks import Vocabulary
from .model import TokenMap
from .prompts import build_restoration_prompt

__all__ = ["DenoiseSpec", "ProtocolError", "RunReport", "MASK_TASKS", "TRANSLATION_TASKS",
           "mask_positions", "make_copies", "mask_chunks", "translation_windows",
           "run_mask_restoration", "run_map_translation", "run_masked_restoration_30pct",
           "restore_positions", "random_mask_positions",
           "restoration_answers", "translation_answers",
           "rotate_map", "shift_map", "masked_visualization_map", "parse_token_strings"]

MASK_TASKS = ("inpaint", "outpaint")
TRANSLATION_TASKS = ("deblur", "rotate", "shift")
MASKED_RESTORATION_RATIO = 0.3


class ProtocolError(ValueError):
    pass


@dataclass
class DenoiseSpec:
    """Corruption schedule and window sizes for one denoising task."""

    task: str
    copies: int = 10
    ratio_start: float = 0.23
    ratio_step: float = 0.03
    context_len: int = 16  # n
    stride: int = 2        # m

    def __post_init__(self):
        if self.task not in MASK_TASKS + TRANSLATION_TASKS:
            raise ProtocolError(f"unknown denoise task {self.task!r}")
        if self.copies < 1 or self.context_len < 1 or self.stride < 1:
            raise ProtocolError("DenoiseSpec: copies, context_len, stride must be >= 1")
        if not 0 < self.ratio_start <= 1 or self.ratio_step < 0:
            raise ProtocolError("DenoiseSpec: invalid ratio schedule")
        if self.ratio_at(self.copies) > 1:
            raise ProtocolError("DenoiseSpec: schedule exceeds a replacement ratio of 1")

    def ratio_at(self, s: int) -> float:
        """Replacement ratio of copy s (1-based)."""
        if not 1 <= s <= self.copies:
            raise ProtocolError(f"copy index {s} outside 1..{self.copies}")
        return self.ratio_start + self.ratio_step * (s - 1)

    def replaced_count(self, s: int, k_local: int) -> int:
        return int(math.floor(self.ratio_at(s) * k_local))


@dataclass
class RunReport:
    """Per-task call accounting written next to the wire log."""

    task: str
    calls: int = 0
    fallbacks: int = 0
    records: list = field(default_factory=list)
    started: float = field(default_factory=time.time)
    elapsed: float = 0.0

    def add(self, positions: Sequence[int], prompt_len: int, completion: str, fallbacks: int) -> None:
        self.calls += 1
        self.fallbacks += fallbacks
        self.records.append({"call": self.calls, "positions": [int(p) for p in positions],
                             "prompt_chars": prompt_len, "completion": completion,
                             "fallbacks": fallbacks})

    def finish(self) -> None:
        self.elapsed = time.time() - self.started

    def to_json(self) -> str:
        return json.dumps({"task": self.task, "calls": self.calls, "fallbacks": self.fallbacks,
                           "elapsed": self.elapsed, "records": self.records}, indent=2)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")


# ---------------------------------------------------------------------------
# masks, copies, windows
# ---------------------------------------------------------------------------


def mask_positions(task: str, grid_shape: tuple[int, int]) -> np.ndarray:
    """Flat positions covered by the task mask, ascending.

    Inpainting masks the centered (h/2 x w/2) block; outpainting masks the
    bottom h/2 rows across the full width. On a 16x16 grid these are the
    8x8 center (rows and cols 4..11) and the 8x16 bottom (rows 8..15).
    """
    h, w = grid_shape
    if h < 2 or w < 2:
        raise ProtocolError(f"grid {grid_shape} too small to mask")
    mh = h // 2
    if task == "inpaint":
        mw = w // 2
        top, left = (h - mh) // 2, (w - mw) // 2
        rows, cols = np.arange(top, top + mh), np.arange(left, left + mw)
    elif task == "outpaint":
        rows, cols = np.arange(h - mh, h), np.arange(w)
    else:
        raise ProtocolError(f"task {task!r} has no mask geometry")
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return (rr * w + cc).reshape(-1)


def make_copies(
    tm: TokenMap,
    spec: DenoiseSpec,
    codebook_size: int,
    seed: int,
    paired_with: Optional[TokenMap] = None,
) -> Union[list[TokenMap], tuple[list[TokenMap], list[TokenMap]]]:
    """Corrupted copies of a map, one per schedule step.

    Copy s replaces floor(ratio_at(s) * K_l) flat positions, chosen without
    replacement, with ids drawn uniformly from the local codebook. With
    ``paired_with`` the same positions receive the same replacement ids in
    both maps, returning (copies, paired_copies).
    """
    if codebook_size < 1:
        raise ProtocolError("make_copies: codebook size must be >= 1")
    if paired_with is not None and paired_with.grid_shape != tm.grid_shape:
        raise ProtocolError(f"make_copies: paired grids differ: "
                            f"{tm.grid_shape} vs {paired_with.grid_shape}")
    k_l = tm.k_local
    rng = np.random.default_rng(seed)
    copies: list[TokenMap] = []
    paired: list[TokenMap] = []
    for s in range(1, spec.copies + 1):
        count = spec.replaced_count(s, k_l)
        positions = rng.choice(k_l, size=count, replace=False)
        new_ids = rng.integers(0, codebook_size, size=count)
        flat = tm.flat_local().copy()
        flat[positions] = new_ids
        copies.append(TokenMap(tm.global_ids.copy(), flat.reshape(tm.grid_shape)))
        if paired_with is not None:
            pflat = paired_with.flat_local().copy()
            pflat[positions] = new_ids
            paired.append(TokenMap(paired_with.global_ids.copy(),
                                   pflat.reshape(paired_with.grid_shape)))
    if paired_with is not None:
        return copies, paired
    return copies


def mask_chunks(positions: Sequence[int], stride: int) -> list[list[int]]:
    """Raster-ordered groups of at most ``stride`` masked positions."""
    ordered = sorted(int(p) for p in positions)
    return [ordered[i : i + stride] for i in range(0, len(ordered), stride)]


def translation_windows(k_local: int, context_len: int, stride: int) -> list[tuple[int, int, int]]:
    """(context_start, target_start, target_end) per call, covering the map."""
    out = []
    for j in range(0, k_local, stride):
        end = min(j + stride, k_local)
        out.append((max(0, j - context_len), j, end))
    return out


# ---------------------------------------------------------------------------
# completion parsing
# ---------------------------------------------------------------------------


def _common_prefix_len(a: str, b: str) -> int:
    n = min(len(a), len(b))
    for i in range(n):
        if a[i] != b[i]:
            return i
    return n


def parse_token_strings(text: str, vocab: Vocabulary, count: int) -> tuple[list[int], int]:
    """First ``count`` whitespace-separated tokens mapped to vocabulary ids.

    Unknown strings are snapped to the entry sharing the longest prefix
    (ties to the lower id); the number of such fallbacks is returned.
    """
    pieces = [p for p in text.split() if p]
    if len(pieces) < count:
        raise ProtocolError(f"completion has {len(pieces)} tokens, expected {count}: {text!r}")
    ids: list[int] = []
    fallbacks = 0
    for piece in pieces[:count]:
        if piece in vocab:
            ids.append(vocab.id_of(piece))
            continue
        fallbacks += 1
        best_id, best_len = 0, -1
        for i, entry in enumerate(vocab.entries):
            cl = _common_prefix_len(piece, entry)
            if cl > best_len:
                best_id, best_len = i, cl
        ids.append(best_id)
    return ids, fallbacks


def _check_vocab_for_prompts(vocab: Vocabulary) -> None:
    for entry in vocab.entries:
        if " " in entry or not entry:
            raise ProtocolError("restoration requires non-empty, space-free local "
                                f"vocabulary entries; offending entry: {entry!r}")


# ---------------------------------------------------------------------------
# runners
# ---------------------------------------------------------------------------


def restore_positions(
    tm: TokenMap,
    positions,
    copies: list[TokenMap],
    llm,
    spec: DenoiseSpec,
    vocab: Vocabulary,
    report: Optional[RunReport] = None,
) -> TokenMap:
    """Fill arbitrary flat positions of a map, raster order, stride at a time."""
    working = tm.flat_local().copy()
    copy_flats = [c.flat_local() for c in copies]
    n = spec.context_len
    max_tokens = max(16, 4 * spec.stride)
    for chunk in mask_chunks(positions, spec.stride):
        first = chunk[0]
        lo = max(0, first - n)
        examples = [(cf[lo:first], cf[chunk]) for cf in copy_flats]
        prompt = build_restoration_prompt(examples, working[lo:first], spec.stride, vocab)
        completion = llm.complete(prompt.rendered, max_tokens=max_tokens, stop=None)
        ids, fallbacks = parse_token_strings(completion, vocab, len(chunk))
        working[chunk] = ids
        if report is not None:
            report.add(chunk, len(prompt.rendered), completion, fallbacks)
    if report is not None:
        report.finish()
    return TokenMap(tm.global_ids.copy(), working.reshape(tm.grid_shape))


def run_mask_restoration(
    task: str,
    tm: TokenMap,
    llm,
    spec: DenoiseSpec,
    vocab: Vocabulary,
    seed: int = 0,
    report: Optional[RunReport] = None,
) -> TokenMap:
    """Fill the task's masked region of a token map via windowed prediction."""
    if task not in MASK_TASKS:
        raise ProtocolError(f"run_mask_restoration: task must be one of {MASK_TASKS}")
    if spec.task != task:
        raise ProtocolError(f"spec is for task {spec.task!r}, not {task!r}")
    _check_vocab_for_prompts(vocab)
    positions = mask_positions(task, tm.grid_shape)
    copies = make_copies(tm, spec, len(vocab), seed)
    return restore_positions(tm, positions, copies, llm, spec, vocab, report)


def run_map_translation(
    task: str,
    polluted: TokenMap,
    reference: TokenMap,
    llm,
    spec: DenoiseSpec,
    vocab: Vocabulary,
    seed: int = 0,
    report: Optional[RunReport] = None,
) -> TokenMap:
    """Translate a polluted map window-by-window back to a clean map.

    The in-context examples pair identically re-corrupted windows of the
    polluted map with those of the reference map, the clean tokens the
    protocol is teaching the backend to emit.
    """
    if task not in TRANSLATION_TASKS:
        raise ProtocolError(f"run_map_translation: task must be one of {TRANSLATION_TASKS}")
    if spec.task != task:
        raise ProtocolError(f"spec is for task {spec.task!r}, not {task!r}")
    if polluted.grid_shape != reference.grid_shape:
        raise ProtocolError("run_map_translation: polluted and reference grids differ")
    _check_vocab_for_prompts(vocab)
    polluted_copies, reference_copies = make_copies(polluted, spec, len(vocab), seed,
                                                    paired_with=reference)
    pol_flats = [c.flat_local() for c in polluted_copies]
    ref_flats = [c.flat_local() for c in reference_copies]
    flat_in = polluted.flat_local()
    restored = flat_in.copy()
    max_tokens = max(16, 4 * spec.stride)
    for lo, start, end in translation_windows(polluted.k_local, spec.context_len, spec.stride):
        examples = [(pf[lo:end], rf[start:end]) for pf, rf in zip(pol_flats, ref_flats)]
        prompt = build_restoration_prompt(examples, flat_in[lo:end], spec.stride, vocab)
        completion = llm.complete(prompt.rendered, max_tokens=max_tokens, stop=None)
        ids, fallbacks = parse_token_strings(completion, vocab, end - start)
        restored[start:end] = ids
        if report is not None:
            report.add(range(start, end), len(prompt.rendered), completion, fallbacks)
    if report is not None:
        report.finish()
    return TokenMap(polluted.global_ids.copy(), restored.reshape(polluted.grid_shape))


def run_masked_restoration_30pct(
    tm: TokenMap,
    llm,
    vocab: Vocabulary,
    seed: int,
    spec: Optional[DenoiseSpec] = None,
    report: Optional[RunReport] = None,
) -> TokenMap:
    """Restore 30% randomly masked positions with the windowed protocol.

    The seed splits into one stream for the mask choice and one for the
    corruption copies.
    """
    spec = spec or DenoiseSpec("inpaint")
    _check_vocab_for_prompts(vocab)
    ss_mask, ss_copies = np.random.SeedSequence(seed).spawn(2)
    mask_rng = np.random.default_rng(ss_mask)
    count = int(math.floor(MASKED_RESTORATION_RATIO * tm.k_local))
    positions = np.sort(mask_rng.choice(tm.k_local, size=count, replace=False))
    copies = make_copies(tm, spec, len(vocab), int(ss_copies.generate_state(1)[0]))
    return restore_positions(tm, positions, copies, llm, spec, vocab, report)


def random_mask_positions(tm: TokenMap, seed: int) -> np.ndarray:
    """The mask set run_masked_restoration_30pct would use for this seed."""
    ss_mask, _ = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(ss_mask)
    count = int(math.floor(MASKED_RESTORATION_RATIO * tm.k_local))
    return np.sort(rng.choice(tm.k_local, size=count, replace=False))


# ---------------------------------------------------------------------------
# oracle answer construction and grid-level corruption fixtures
# ---------------------------------------------------------------------------


def restoration_answers(truth: TokenMap, positions: Sequence[int], stride: int,
                        vocab: Vocabulary) -> list[str]:
    """Ground-truth completions, one per masked-restoration call."""
    flat = truth.flat_local()
    return [" ".join(vocab.text(int(flat[p])) for p in chunk)
            for chunk in mask_chunks(positions, stride)]


def translation_answers(clean: TokenMap, context_len: int, stride: int,
                        vocab: Vocabulary) -> list[str]:
    """Ground-truth completions, one per map-translation call."""
    flat = clean.flat_local()
    return [" ".join(vocab.text(int(t)) for t in flat[start:end])
            for _, start, end in translation_windows(clean.k_local, context_len, stride)]


def rotate_map(tm: TokenMap, quarter_turns: int = 1) -> TokenMap:
    return TokenMap(tm.global_ids.copy(), np.rot90(tm.local_ids, k=quarter_turns).copy())


def shift_map(tm: TokenMap, dy: int = 0, dx: int = 1) -> TokenMap:
    return TokenMap(tm.global_ids.copy(), np.roll(tm.local_ids, shift=(dy, dx), axis=(0, 1)))


def masked_visualization_map(tm: TokenMap, positions: Sequence[int]) -> TokenMap:
    """Masked positions zeroed, for decoding the 'input' visualization."""
    flat = tm.flat_local().copy()
    flat[np.asarray(list(positions), dtype=np.int64)] = 0
    return TokenMap(tm.global_ids.copy(), flat.reshape(tm.grid_shape))
