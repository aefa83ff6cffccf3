"""Datasets: IDX image files, synthetic Gaussian blobs, pooling and splits."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import Batch

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"
    indices: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.inputs.shape[0] < 1:
            raise ValueError("dataset needs at least one row of inputs")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ValueError("one label per input row")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def batch(self, idx=None) -> Batch:
        if idx is None:
            return Batch(self.inputs, self.labels)
        return Batch(self.inputs[idx], self.labels[idx])

    def take(self, idx, name: str | None = None) -> Dataset:
        idx = np.asarray(idx, dtype=np.int64)
        base = self.indices if self.indices is not None else np.arange(len(self))
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes, name or self.name, base[idx])


@dataclass(frozen=True)
class SplitSpec:
    n_train: int
    n_val: int
    n_test: int
    seed: int = 0
    stratified: bool = True


def _read_exact(buf: bytes, offset: int, n: int, what: str) -> bytes:
    if offset + n > len(buf):
        raise IdxFormatError(f"truncated file: {what} needs {n} bytes at offset {offset}, file has {len(buf)}")
    return buf[offset:offset + n]


def parse_idx_images(buf: bytes) -> np.ndarray:
    magic, count, rows, cols = struct.unpack(">IIII", _read_exact(buf, 0, 16, "image header"))
    if magic != IDX_IMAGES_MAGIC:
        raise IdxFormatError(f"bad magic in images file: 0x{magic:08x}")
    payload = _read_exact(buf, 16, count * rows * cols, "image payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(count, rows, cols)


def parse_idx_labels(buf: bytes) -> np.ndarray:
    magic, count = struct.unpack(">II", _read_exact(buf, 0, 8, "label header"))
    if magic != IDX_LABELS_MAGIC:
        raise IdxFormatError(f"bad magic in labels file: 0x{magic:08x}")
    return np.frombuffer(_read_exact(buf, 8, count, "label payload"), dtype=np.uint8)


def encode_idx_images(images: np.ndarray) -> bytes:
    images = np.asarray(images, dtype=np.uint8)
    return struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape) + images.tobytes()


def encode_idx_labels(labels) -> bytes:
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">II", IDX_LABELS_MAGIC, labels.size) + labels.tobytes()


def load_idx(images_path, labels_path, name: str | None = None) -> Dataset:
    """Load an IDX image/label pair, scaling pixels to [0, 1]."""
    images = parse_idx_images(Path(images_path).read_bytes())
    labels = parse_idx_labels(Path(labels_path).read_bytes())
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"count mismatch: {images.shape[0]} images but {labels.shape[0]} labels")
    inputs = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    num_classes = int(labels.max()) + 1 if labels.size else 1
    return Dataset(inputs, labels.astype(np.int64), num_classes, name or Path(images_path).stem)


def class_means(num_classes: int, dim: int, separation: float = 1.0) -> np.ndarray:
    """Class centres on a circle in the first two coordinates."""
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    means = np.zeros((num_classes, dim))
    means[:, 0] = np.cos(angles)
    means[:, 1] = np.sin(angles)
    return separation * means


def random_means(rng: np.random.Generator, num_classes: int, dim: int, separation: float = 1.0) -> np.ndarray:
    """Class centres with i.i.d. N(0, separation^2) coordinates, so every feature carries signal."""
    return separation * rng.standard_normal((num_classes, dim))


def synth_blobs(seed: int, n_per_class: int, num_classes: int, dim: int, spread: float,
                separation: float = 1.0, name: str = "blobs", layout: str = "circle") -> Dataset:
    """Gaussian class blobs. ``layout`` is ``circle`` (means in the first two
    coordinates) or ``random`` (dense random means, suitable for pooling)."""
    if num_classes < 2 or dim < 2:
        raise ValueError("need at least 2 classes and 2 dimensions")
    rng = np.random.default_rng(seed)
    if layout == "circle":
        means = class_means(num_classes, dim, separation)
    elif layout == "random":
        means = random_means(rng, num_classes, dim, separation)
    else:
        raise ValueError(f"unknown blob layout {layout!r}")
    labels = np.repeat(np.arange(num_classes), n_per_class)
    inputs = means[labels] + spread * rng.standard_normal((labels.size, dim))
    order = rng.permutation(labels.size)
    return Dataset(inputs[order], labels[order], num_classes, name)


def downsample_2x(images: np.ndarray, side: int | None = None) -> np.ndarray:
    """2x2 average pooling of flattened square images."""
    images = np.asarray(images, dtype=np.float64)
    n, d = images.shape
    side = side or int(round(np.sqrt(d)))
    if side * side != d or side % 2:
        raise ValueError(f"cannot pool images of {d} pixels (side {side})")
    h = side // 2
    return images.reshape(n, h, 2, h, 2).mean(axis=(2, 4)).reshape(n, h * h)


def downsample_dataset(ds: Dataset) -> Dataset:
    return Dataset(downsample_2x(ds.inputs), ds.labels, ds.num_classes, ds.name + "-14", ds.indices)


def subsample(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Seeded, disjoint train/val/test draw; stratified splits are class balanced."""
    sizes = (spec.n_train, spec.n_val, spec.n_test)
    if min(sizes) < 1 or sum(sizes) > len(dataset):
        raise ValueError(f"infeasible split {sizes} from {len(dataset)} rows")
    rng = np.random.default_rng(spec.seed)
    if not spec.stratified:
        order = rng.permutation(len(dataset))
        bounds = np.cumsum((0,) + sizes)
        parts = [order[bounds[i]:bounds[i + 1]] for i in range(3)]
    else:
        C = dataset.num_classes
        pools = [rng.permutation(np.flatnonzero(dataset.labels == c)) for c in range(C)]
        cursor = [0] * C
        parts = []
        for size in sizes:
            quota = np.full(C, size // C)
            # remainder goes to a seeded random subset of classes
            quota[rng.permutation(C)[: size % C]] += 1
            chosen = []
            for c in range(C):
                take = pools[c][cursor[c]:cursor[c] + quota[c]]
                if take.size < quota[c]:
                    raise ValueError(f"class {c} has too few rows for a stratified split")
                cursor[c] += quota[c]
                chosen.append(take)
            parts.append(rng.permutation(np.concatenate(chosen)))
    names = ("train", "val", "test")
    return tuple(dataset.take(p, f"{dataset.name}-{nm}") for p, nm in zip(parts, names))
