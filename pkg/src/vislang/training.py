"""Training loop, learning-rate wiring, and the checkpoint container.

Checkpoints use the "V2LM" container: magic, version (u16), section count
(u16), then named sections (u16 name length + name, u64 payload length +
payload), closed by an 8-byte BLAKE2b checksum over the concatenated
payloads. Batches are drawn without replacement per step from a dedicated
generator whose state is checkpointed, so a resumed run replays the exact
step sequence.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .autodiff import NonFiniteValues, backward
from .imageio import Dataset
from .model import TokenizerModel
from .optim import Adam

__all__ = ["TrainConfig", "TrainingDiverged", "CheckpointError", "TrainResult",
           "train", "save_checkpoint", "load_checkpoint", "apply_checkpoint",
           "write_loss_csv", "Checkpoint"]

CHECKPOINT_MAGIC = b"V2LM"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, detail: str):
        super().__init__(f"training diverged at step {step}: {detail}")
        self.step = step


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 12
    batch_size: int = 8
    base_lr: float = 5e-4
    warmup_epochs: int = 5
    beta: float = 0.3
    # recorded weights of the full objective; the perceptual and adversarial
    # terms themselves are out of scope at this scale
    lambda_perceptual: float = 1.0
    lambda_gan: float = 0.1
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("TrainConfig: base_lr must be positive")
        if self.beta <= 0:
            raise ValueError("TrainConfig: beta must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("TrainConfig: epochs and batch_size must be >= 1")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs, "batch_size": self.batch_size, "base_lr": self.base_lr,
            "warmup_epochs": self.warmup_epochs, "beta": self.beta,
            "lambda_perceptual": self.lambda_perceptual, "lambda_gan": self.lambda_gan,
            "checkpoint_every": self.checkpoint_every, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainResult:
    rows: list[dict]
    steps: int
    optimizer: Adam


def schedule_steps(config: TrainConfig, dataset_size: int) -> tuple[int, int]:
    per_epoch = math.ceil(dataset_size / config.batch_size)
    return config.warmup_epochs * per_epoch, config.epochs * per_epoch


def train(
    model: TokenizerModel,
    dataset: Dataset,
    config: TrainConfig,
    checkpoint_path: Optional[Union[str, Path]] = None,
    resume_from: Optional[Union[str, Path]] = None,
    max_steps: Optional[int] = None,
) -> TrainResult:
    """Optimize the encoder, decoder, and projector against frozen codebooks."""
    if len(dataset) == 0:
        raise ValueError("train: dataset is empty")
    warmup_steps, total_steps = schedule_steps(config, len(dataset))
    params = model.parameters()
    optimizer = Adam(params, base_lr=config.base_lr, warmup_steps=warmup_steps,
                     total_steps=total_steps)
    rng = np.random.default_rng(config.seed)
    start_step = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        start_step = apply_checkpoint(model, optimizer, rng, ckpt)

    n = len(dataset)
    rows: list[dict] = []
    stop_at = total_steps if max_steps is None else min(total_steps, start_step + max_steps)
    for step in range(start_step, stop_at):
        idx = rng.choice(n, size=min(config.batch_size, n), replace=False)
        batch = dataset.images[idx]
        keys = [dataset.keys[i] for i in idx]
        try:
            loss, parts, _ = model.training_loss(batch, keys=keys, beta=config.beta)
        except NonFiniteValues as exc:
            raise TrainingDiverged(step + 1, str(exc)) from exc
        if not np.isfinite(parts["total"]):
            raise TrainingDiverged(step + 1, f"loss value {parts['total']}")
        optimizer.zero_grad()
        backward(loss)
        lr = optimizer.step()
        rows.append({"step": step + 1, "lr": lr, "total": parts["total"],
                     "recon": parts["recon"], "codebook": parts["codebook"],
                     "commit": parts["commit"]})
        done = step + 1
        if checkpoint_path is not None and (
            done == stop_at or (config.checkpoint_every and done % config.checkpoint_every == 0)
        ):
            save_checkpoint(checkpoint_path, model, optimizer, rng,
                            {"step": done, "train_config": config.to_dict()})
    return TrainResult(rows=rows, steps=stop_at, optimizer=optimizer)


def write_loss_csv(rows: list[dict], path: Union[str, Path], append: bool = False) -> None:
    header = "step,lr,total,recon,codebook,commit\n"
    lines = [] if append else [header]
    for r in rows:
        lines.append("%d,%.17g,%.17g,%.17g,%.17g,%.17g\n"
                     % (r["step"], r["lr"], r["total"], r["recon"], r["codebook"], r["commit"]))
    mode = "a" if append else "w"
    with open(path, mode, encoding="utf-8") as fh:
        fh.writelines(lines)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------


def _pack_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape) if a.ndim else b"")
        parts.append(a.tobytes())
    return b"".join(parts)


def _unpack_arrays(blob: bytes) -> dict[str, np.ndarray]:
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError("truncated array section")
        out = blob[pos : pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<I", take(4))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim)) if ndim else ()
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arrays[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(blob):
        raise CheckpointError("trailing bytes in array section")
    return arrays


@dataclass
class Checkpoint:
    meta: dict
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray]


def save_checkpoint(path: Union[str, Path], model: TokenizerModel, optimizer: Adam,
                    rng: np.random.Generator, meta: dict) -> None:
    doc = dict(meta)
    doc["model_config"] = model.config.to_dict()
    doc["optimizer"] = {"step_count": optimizer.step_count, "base_lr": optimizer.base_lr,
                        "warmup_steps": optimizer.warmup_steps, "total_steps": optimizer.total_steps}
    doc["rng_state"] = rng.bit_generator.state
    sections = [
        ("meta", json.dumps(doc, sort_keys=True).encode("utf-8")),
        ("params", _pack_arrays({k: p.data for k, p in model.parameters().items()})),
        ("optimizer", _pack_arrays(optimizer.state_arrays())),
    ]
    parts = [CHECKPOINT_MAGIC, struct.pack("<HH", CHECKPOINT_VERSION, len(sections))]
    payload_cat = b"".join(p for _, p in sections)
    for name, payload in sections:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<Q", len(payload)))
        parts.append(payload)
    parts.append(struct.pack("<Q", int.from_bytes(
        hashlib.blake2b(payload_cat, digest_size=8).digest(), "little")))
    target = Path(path)
    tmp = target.with_name(target.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(target)


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    version, count = struct.unpack("<HH", blob[4:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 8
    sections: dict[str, bytes] = {}
    payload_cat = b""
    for _ in range(count):
        (nlen,) = struct.unpack("<H", blob[pos : pos + 2])
        pos += 2
        name = blob[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (plen,) = struct.unpack("<Q", blob[pos : pos + 8])
        pos += 8
        payload = blob[pos : pos + plen]
        if len(payload) != plen:
            raise CheckpointError(f"{path}: truncated section {name!r}")
        pos += plen
        sections[name] = payload
        payload_cat += payload
    (stored,) = struct.unpack("<Q", blob[pos : pos + 8])
    if int.from_bytes(hashlib.blake2b(payload_cat, digest_size=8).digest(), "little") != stored:
        raise CheckpointError(f"{path}: checksum mismatch")
    meta = json.loads(sections["meta"].decode("utf-8"))
    return Checkpoint(meta=meta,
                      params=_unpack_arrays(sections["params"]),
                      optimizer=_unpack_arrays(sections["optimizer"]))


def apply_checkpoint(model: TokenizerModel, optimizer: Adam, rng: np.random.Generator,
                     ckpt: Checkpoint) -> int:
    """Restore parameters, optimizer moments, and generator state. Returns the step."""
    params = model.parameters()
    missing = set(params) ^ set(ckpt.params)
    if missing:
        raise CheckpointError(f"parameter names do not match checkpoint: {sorted(missing)}")
    for name, tensor in params.items():
        arr = ckpt.params[name]
        if arr.shape != tensor.data.shape:
            raise CheckpointError(f"parameter {name!r} has shape {arr.shape}, "
                                  f"expected {tensor.data.shape}")
        tensor.data[...] = arr
    optimizer.load_state_arrays(ckpt.optimizer, ckpt.meta["optimizer"]["step_count"])
    state = ckpt.meta["rng_state"]
    rng.bit_generator.state = state
    return int(ckpt.meta["step"])
