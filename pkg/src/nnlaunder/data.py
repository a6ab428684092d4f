"""Datasets: IDX ingestion, limited-budget splits and synthetic corpora."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import IdxFormatError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass
class LabeledDataset:
    """N x H x W x C float32 images in [0, 1] with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.ndim == 3:
            self.images = self.images[..., None]
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.images.ndim != 4:
            raise ValueError(f"images must be N x H x W x C, got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) == 0:
            raise ValueError("dataset is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        if self.images.min() < 0 or self.images.max() > 1:
            raise ValueError("image values must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def subset(self, index) -> "LabeledDataset":
        index = np.asarray(index)
        return LabeledDataset(self.images[index], self.labels[index], self.class_count)

    def counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)


def concat(parts: Sequence[LabeledDataset]) -> LabeledDataset:
    parts = list(parts)
    return LabeledDataset(
        np.concatenate([p.images for p in parts]),
        np.concatenate([p.labels for p in parts]),
        max(p.class_count for p in parts),
    )


# -- IDX ----------------------------------------------------------------------


def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx_file(path, magic, ndim):
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4 + 4 * ndim:
        raise IdxFormatError(f"{path}: truncated header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxFormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    payload = raw[4 + 4 * ndim:]
    size = int(np.prod(dims))
    if len(payload) < size:
        raise IdxFormatError(f"{path}: truncated payload ({len(payload)} of {size} bytes)")
    if len(payload) > size:
        raise IdxFormatError(f"{path}: {len(payload) - size} trailing bytes after payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def read_idx(images_path, labels_path, class_count: Optional[int] = None) -> LabeledDataset:
    """Load an IDX image/label pair; pixels are scaled by 1/255.

    ``class_count`` defaults to ``max(label) + 1``; when given, labels at or
    above it are rejected.
    """
    raw_images = _read_idx_file(images_path, IMAGES_MAGIC, 3)
    raw_labels = _read_idx_file(labels_path, LABELS_MAGIC, 1)
    if len(raw_images) != len(raw_labels):
        raise IdxFormatError(f"{len(raw_images)} images but {len(raw_labels)} labels")
    labels = raw_labels.astype(np.int64)
    if class_count is None:
        class_count = int(labels.max()) + 1
    elif labels.max() >= class_count:
        raise IdxFormatError(f"label {labels.max()} out of range for {class_count} classes")
    images = raw_images.astype(np.float32) / np.float32(255.0)
    return LabeledDataset(images[..., None], labels, class_count)


def write_idx(data: LabeledDataset, images_path, labels_path):
    """Write a single-channel dataset as an IDX pair (pixels rounded to bytes)."""
    if data.images.shape[-1] != 1:
        raise IdxFormatError("IDX image files hold single-channel images only")
    n, h, w, _ = data.images.shape
    pixels = np.rint(data.images[..., 0] * 255.0).astype(np.uint8)
    if data.labels.max() > 255:
        raise IdxFormatError("IDX label files hold byte labels only")
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGES_MAGIC, n, h, w))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", LABELS_MAGIC, n))
        f.write(data.labels.astype(np.uint8).tobytes())


def write_idx_tensor(array, path):
    """Write an arbitrary-rank float32 tensor as IDX (type code 0x0D, big-endian)."""
    array = np.ascontiguousarray(array, dtype=">f4")
    with open(path, "wb") as f:
        f.write(struct.pack(">BBBB", 0, 0, 0x0D, array.ndim))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


def read_idx_tensor(path) -> np.ndarray:
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4 or raw[:3] != b"\0\0\x0d":
        raise IdxFormatError(f"{path}: not a float32 IDX tensor")
    ndim = raw[3]
    if len(raw) < 4 + 4 * ndim:
        raise IdxFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    payload = raw[4 + 4 * ndim:]
    if len(payload) != 4 * int(np.prod(dims)):
        raise IdxFormatError(f"{path}: payload size does not match dimensions {dims}")
    return np.frombuffer(payload, dtype=">f4").reshape(dims).astype(np.float32)


# -- splits -------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    mode: str = "fraction"  # "fraction" | "one-per-class"
    fraction: float = 0.006
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        if self.mode not in ("fraction", "one-per-class"):
            raise ValueError(f"unknown split mode {self.mode!r}")
        if self.mode == "fraction" and not 0.0 < self.fraction <= 1.0:
            raise ValueError("fraction must lie in (0, 1]")


def split_indices(labels: np.ndarray, class_count: int, spec: SplitSpec) -> np.ndarray:
    """Sorted indices of the retained items."""
    rng = np.random.default_rng(spec.seed)
    n = len(labels)
    if spec.mode == "fraction" and not spec.stratified:
        total = int(np.floor(n * spec.fraction))
        return np.sort(rng.permutation(n)[:total])

    by_class = [np.flatnonzero(labels == c) for c in range(class_count)]
    empty = [c for c, idx in enumerate(by_class) if len(idx) == 0]
    if empty:
        raise ValueError(f"stratified split needs every class present; missing {empty}")
    if spec.mode == "one-per-class":
        quota = np.ones(class_count, dtype=np.int64)
    else:
        total = int(np.floor(n * spec.fraction))
        quota = np.full(class_count, total // class_count, dtype=np.int64)
        quota[rng.permutation(class_count)[: total % class_count]] += 1
        sizes = np.array([len(idx) for idx in by_class])
        # classes too small for their quota give the remainder to the others
        short = np.maximum(quota - sizes, 0).sum()
        quota = np.minimum(quota, sizes)
        while short > 0:
            room = np.flatnonzero(quota < sizes)
            if len(room) == 0:
                break
            for c in room[:short]:
                quota[c] += 1
                short -= 1
    chosen = [rng.permutation(idx)[:q] for idx, q in zip(by_class, quota)]
    return np.sort(np.concatenate(chosen))


def limited_split(data: LabeledDataset, spec: SplitSpec) -> tuple[LabeledDataset, LabeledDataset]:
    """Partition into (retain, rest).  ``rest`` is None when nothing is left."""
    keep = split_indices(data.labels, data.class_count, spec)
    mask = np.zeros(len(data), dtype=bool)
    mask[keep] = True
    rest = data.subset(np.flatnonzero(~mask)) if (~mask).any() else None
    return data.subset(keep), rest


# -- synthetic corpora --------------------------------------------------------


def synth_blobs(classes: int, per_class: int, dims=(8, 8), seed: int = 0, spread: float = 0.08) -> LabeledDataset:
    """Class-conditional Gaussian blobs rendered as single-channel images."""
    if classes < 2:
        raise ValueError("synth_blobs needs at least two classes")
    rng = np.random.default_rng(seed)
    h, w = dims
    prototypes = rng.uniform(0.2, 0.8, size=(classes, h, w))
    labels = np.repeat(np.arange(classes), per_class)
    images = prototypes[labels] + rng.normal(0.0, spread, size=(len(labels), h, w))
    order = rng.permutation(len(labels))
    return LabeledDataset(np.clip(images[order], 0, 1)[..., None], labels[order], classes)


# t, u, w, x, y, z as 1-based alphabet positions
PLUS_LETTER_IDS = (20, 21, 23, 24, 25, 26)


def mnist_plus(digits: LabeledDataset, letters: LabeledDataset,
               letter_ids: Sequence[int] = PLUS_LETTER_IDS) -> LabeledDataset:
    """Append letter classes to a 10-class digit set, relabelled 10, 11, ...

    ``letter_ids`` are the label values in ``letters`` to keep, in order; with
    EMNIST-letters files these are 1-based alphabet positions.
    """
    parts = [LabeledDataset(digits.images, digits.labels, 10 + len(letter_ids))]
    for offset, lid in enumerate(letter_ids):
        idx = np.flatnonzero(letters.labels == lid)
        if len(idx) == 0:
            raise ValueError(f"no letters with label {lid}")
        parts.append(LabeledDataset(letters.images[idx], np.full(len(idx), 10 + offset), 10 + len(letter_ids)))
    return concat(parts)
