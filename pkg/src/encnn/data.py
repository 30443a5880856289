"""MNIST ingestion: IDX parsing, normalization, and deterministic splits.

IDX files are big-endian: a u32 magic (0x00000803 for image tensors,
0x00000801 for label vectors), u32 dimension sizes, then raw u8 payload.
Files ending in .gz are decompressed transparently. Pixels are normalized
to [0, 1] by dividing by 255.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Tuple

import numpy as np

__all__ = ["Dataset", "load_idx", "split"]

_IMAGE_MAGIC = 0x00000803
_LABEL_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    """Images (N, 28, 28) float64 in [0,1] with integer labels 0-9."""

    images: np.ndarray
    labels: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(
                f"image count {len(self.images)} != label count {len(self.labels)}"
            )

    @property
    def count(self) -> int:
        return len(self.labels)


def _read_bytes(path) -> bytes:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such file: {p}")
    raw = p.read_bytes()
    if p.suffix == ".gz":
        raw = gzip.decompress(raw)
    return raw


def _parse_header(raw: bytes, want_magic: int, ndims: int, path) -> Tuple[tuple, int]:
    header_len = 4 * (1 + ndims)
    if len(raw) < header_len:
        raise ValueError(f"truncated IDX file (header short): {path}")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != want_magic:
        raise ValueError(
            f"bad IDX magic in {path}: got {magic:#010x}, want {want_magic:#010x}"
        )
    dims = struct.unpack(f">{ndims}I", raw[4:header_len])
    return dims, header_len


def load_idx(images_path, labels_path) -> Dataset:
    """Parse an IDX image/label file pair into a normalized Dataset."""
    img_raw = _read_bytes(images_path)
    dims, off = _parse_header(img_raw, _IMAGE_MAGIC, 3, images_path)
    count, rows, cols = dims
    payload = img_raw[off:]
    if len(payload) < count * rows * cols:
        raise ValueError(
            f"truncated IDX file: {images_path} promises {count}x{rows}x{cols} "
            f"pixels but holds {len(payload)} bytes"
        )
    pixels = np.frombuffer(payload, dtype=np.uint8, count=count * rows * cols)
    images = pixels.reshape(count, rows, cols).astype(np.float64) / 255.0

    lab_raw = _read_bytes(labels_path)
    (lab_count,), off = _parse_header(lab_raw, _LABEL_MAGIC, 1, labels_path)
    lab_payload = lab_raw[off:]
    if len(lab_payload) < lab_count:
        raise ValueError(
            f"truncated IDX file: {labels_path} promises {lab_count} labels "
            f"but holds {len(lab_payload)} bytes"
        )
    labels = np.frombuffer(lab_payload, dtype=np.uint8, count=lab_count).astype(np.int64)

    if count != lab_count:
        raise ValueError(
            f"count mismatch: {images_path} has {count} images but "
            f"{labels_path} has {lab_count} labels"
        )
    return Dataset(images, labels, {"source": (str(images_path), str(labels_path))})


def split(ds: Dataset, train_n: int, test_n: int, seed: int) -> Tuple[Dataset, Dataset]:
    """Disjoint, seed-deterministic train/test subsets."""
    if train_n < 0 or test_n < 0:
        raise ValueError("split sizes must be non-negative")
    if train_n + test_n > ds.count:
        raise ValueError(
            f"cannot draw {train_n}+{test_n} examples from {ds.count}"
        )
    perm = np.random.default_rng(seed).permutation(ds.count)
    tr, te = perm[:train_n], perm[train_n : train_n + test_n]
    return (
        Dataset(ds.images[tr], ds.labels[tr], {**ds.meta, "split": ("train", train_n, seed)}),
        Dataset(ds.images[te], ds.labels[te], {**ds.meta, "split": ("test", test_n, seed)}),
    )
