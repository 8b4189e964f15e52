"""Raw 8-bit RGB image container and dataset directory handling.

Images are stored as "RIMG" files: magic, u32 height, u32 width,
u32 channels (always 3), then height*width*channels uint8 bytes row-major.
In memory images are float64 arrays shaped (3, H, W) with values in [0, 1].
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

__all__ = ["ImageFileError", "Dataset", "read_image", "write_image", "load_dataset"]

MAGIC = b"RIMG"
EXTENSION = ".rimg"


class ImageFileError(ValueError):
    pass


def write_image(image: np.ndarray, path: Union[str, Path]) -> None:
    """Write a (3, H, W) float image in [0, 1] as an RIMG file."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ImageFileError(f"write_image: expected (3, H, W), got {arr.shape}")
    quant = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    payload = np.moveaxis(quant, 0, 2).tobytes()  # H, W, C order on disk
    header = MAGIC + struct.pack("<III", arr.shape[1], arr.shape[2], 3)
    Path(path).write_bytes(header + payload)


def read_image(path: Union[str, Path]) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ImageFileError(f"{path}: bad magic, not a raw image file")
    if len(blob) < 16:
        raise ImageFileError(f"{path}: truncated header")
    h, w, c = struct.unpack("<III", blob[4:16])
    if c != 3:
        raise ImageFileError(f"{path}: expected 3 channels, got {c}")
    expected = 16 + h * w * c
    if len(blob) != expected:
        raise ImageFileError(f"{path}: payload length {len(blob) - 16} does not match header")
    raw = np.frombuffer(blob, dtype=np.uint8, offset=16).reshape(h, w, c)
    return np.moveaxis(raw, 2, 0).astype(np.float64) / 255.0


@dataclass
class Dataset:
    """Uniformly sized images plus their string keys (file stems)."""

    images: np.ndarray  # (count, 3, H, W)
    keys: tuple[str, ...]

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ImageFileError(f"Dataset: expected (N, 3, H, W), got {self.images.shape}")
        if len(self.keys) != self.images.shape[0]:
            raise ImageFileError("Dataset: key count does not match image count")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_size(self) -> int:
        return self.images.shape[2]


def load_dataset(directory: Union[str, Path]) -> Dataset:
    """Load every RIMG file in a directory, sorted by filename."""
    root = Path(directory)
    paths = sorted(root.glob(f"*{EXTENSION}"))
    if not paths:
        raise ImageFileError(f"{directory}: no {EXTENSION} images found")
    images = [read_image(p) for p in paths]
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ImageFileError(f"{directory}: images have mixed shapes {sorted(shapes)}")
    return Dataset(np.stack(images), tuple(p.stem for p in paths))
