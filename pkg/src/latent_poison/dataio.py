"""IDX ingestion, MNIST splits and deterministic batching.

The IDX layout is a 4-byte magic (two zero bytes, a dtype code, a dimension
count), one big-endian u32 per dimension, then the row-major payload.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import BadMagic, MissingFile, ShapeMismatch, TruncatedPayload

UBYTE = 0x08

TRAIN_SIZE = 55_000
VAL_SIZE = 5_000
SPLITS = ("train", "val", "test")

_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass(frozen=True)
class RawIdxTensor:
    dtype_code: int
    dims: tuple[int, ...]
    payload: bytes

    def __post_init__(self):
        if int(np.prod(self.dims, dtype=np.int64)) != len(self.payload):
            raise ShapeMismatch(f"dims {self.dims} do not match payload of {len(self.payload)} bytes")

    @property
    def magic(self) -> int:
        return (self.dtype_code << 8) | len(self.dims)

    def to_array(self) -> np.ndarray:
        return np.frombuffer(self.payload, dtype=np.uint8).reshape(self.dims)


def parse_idx(data: bytes) -> RawIdxTensor:
    if len(data) < 4:
        raise TruncatedPayload(f"need a 4-byte header, got {len(data)} bytes")
    if data[0] != 0 or data[1] != 0:
        raise BadMagic(f"first two magic bytes must be zero, got {data[0]:#x} {data[1]:#x}")
    dtype_code, ndims = data[2], data[3]
    if dtype_code != UBYTE:
        raise BadMagic(f"unsupported IDX dtype code {dtype_code:#x}")
    header_end = 4 + 4 * ndims
    if len(data) < header_end:
        raise TruncatedPayload("header declares more dimensions than bytes available")
    dims = struct.unpack(f">{ndims}I", data[4:header_end])
    size = int(np.prod(dims, dtype=np.int64))
    if len(data) - header_end < size:
        raise TruncatedPayload(f"declared payload {size} bytes, only {len(data) - header_end} available")
    return RawIdxTensor(dtype_code, tuple(dims), bytes(data[header_end:header_end + size]))


def serialize_idx(t: RawIdxTensor) -> bytes:
    header = bytes([0, 0, t.dtype_code, len(t.dims)]) + struct.pack(f">{len(t.dims)}I", *t.dims)
    return header + t.payload


def read_idx_file(path: str | Path) -> RawIdxTensor:
    """Read an IDX file, transparently decompressing a ``.gz`` suffix."""
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return parse_idx(fh.read())
    return parse_idx(path.read_bytes())


def _locate(root: Path, name: str) -> Path:
    for candidate in (root / name, root / (name + ".gz")):
        if candidate.exists():
            return candidate
    raise MissingFile(f"{name}[.gz] not found under {root}")


@dataclass(frozen=True)
class LabeledImageSet:
    images: np.ndarray  # (N, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    split: str
    num_classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ShapeMismatch(f"{len(self.images)} images vs {len(self.labels)} labels")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int | None) -> "LabeledImageSet":
        """First ``n`` records (all when ``n`` is None)."""
        if n is None or n >= len(self):
            return self
        return LabeledImageSet(self.images[:n].copy(), self.labels[:n].copy(), self.split, self.num_classes)


def normalize(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float32) / np.float32(255.0)


def load_dataset(root: str | Path, split: str) -> LabeledImageSet:
    """Load one MNIST split. train/val are the 55k prefix / 5k suffix of the training files."""
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
    root = Path(root)
    img_name, lbl_name = _FILES["test" if split == "test" else "train"]
    images = read_idx_file(_locate(root, img_name)).to_array()
    labels = read_idx_file(_locate(root, lbl_name)).to_array()
    if images.shape[0] != labels.shape[0]:
        raise ShapeMismatch(f"{images.shape[0]} images vs {labels.shape[0]} labels in {root}")
    if split == "train":
        images, labels = images[:TRAIN_SIZE], labels[:TRAIN_SIZE]
    elif split == "val":
        images, labels = images[TRAIN_SIZE:TRAIN_SIZE + VAL_SIZE], labels[TRAIN_SIZE:TRAIN_SIZE + VAL_SIZE]
    return LabeledImageSet(normalize(images), labels.astype(np.int64), split)


def batch_iter(
    data: LabeledImageSet, batch_size: int, seed: int = 0, shuffle: bool = True
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(data)
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield data.images[idx], data.labels[idx]
