"""IDX loading, synthetic Gaussian blobs and seeded batching."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .numcore import Rng

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [n, c, h, w] float64 in [0, 1]
    labels: np.ndarray  # [n] int64
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DatasetError(f"images must be [n,c,h,w], got {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise DatasetError("count mismatch between images and labels")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DatasetError("pixels outside [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError("label outside [0, num_classes)")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.images.shape[1:]))

    def subset(self, idx, name: str | None = None) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, name or self.name)

    def split(self, n_first: int) -> tuple["Dataset", "Dataset"]:
        return (self.subset(np.arange(n_first), f"{self.name}[:{n_first}]"),
                self.subset(np.arange(n_first, len(self)), f"{self.name}[{n_first}:]"))


def _read_idx(path: Path, expected_magic: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise DatasetError(f"{path}: truncated IDX header")
    magic, = struct.unpack(">I", raw[:4])
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise DatasetError(f"{path}: unsupported IDX type (magic 0x{magic:08x})")
    if magic != expected_magic:
        raise DatasetError(f"{path}: unsupported IDX type 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise DatasetError(f"{path}: truncated IDX header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:head])
    count = int(np.prod(dims))
    if len(raw) - head < count:
        raise DatasetError(f"{path}: truncated IDX payload ({len(raw) - head} of {count} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=head).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int = 10, name: str | None = None) -> Dataset:
    """Load an (images, labels) IDX pair, scaling pixels by 1/255."""
    imgs = _read_idx(Path(images_path), IDX_IMAGES)
    labels = _read_idx(Path(labels_path), IDX_LABELS)
    if imgs.shape[0] != labels.shape[0]:
        raise DatasetError(f"count mismatch: {imgs.shape[0]} images vs {labels.shape[0]} labels")
    if labels.size and labels.max() >= num_classes:
        raise DatasetError(f"label {labels.max()} >= num_classes {num_classes}")
    n, h, w = imgs.shape
    return Dataset(imgs.reshape(n, 1, h, w) / 255.0, labels.astype(np.int64), num_classes,
                   name or Path(images_path).name)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images [n, h, w] and labels [n] as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES, *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS, labels.shape[0]))
        f.write(labels.tobytes())


def blob_centers(seed: int, num_classes: int, dim: int, separation: float = 0.4) -> np.ndarray:
    """Centers 0.5 + r * u_c for random zero-mean unit directions u_c.

    Pairwise L2 distances come out near ``separation``.
    """
    rng = Rng(seed, "blob-centers")
    dirs = rng.normal((num_classes, dim))
    dirs -= dirs.mean(axis=0, keepdims=True)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return np.clip(0.5 + dirs * (separation / np.sqrt(2.0)), 0.0, 1.0)


def split_centers(seed: int, num_classes: int, dim: int, robust_dims: int = 16, robust_sep: float = 0.3,
                  weak_sep: float = 0.03) -> np.ndarray:
    """Centers whose classes differ strongly on ``robust_dims`` coordinates and
    by only +-weak_sep/2 on the remaining ones.

    With weak_sep below the attack budget the weak coordinates are individually
    flippable yet jointly very predictive, so a standard-trained net leans on
    them while a classifier restricted to the strong coordinates stays robust.
    """
    if not 0 < robust_dims < dim:
        raise ValueError("need 0 < robust_dims < dim")
    rng = Rng(seed, "split-centers")
    signs = np.sign(rng.normal((num_classes, dim)))
    signs[signs == 0] = 1.0
    half = np.where(np.arange(dim) < robust_dims, robust_sep, weak_sep) / 2
    return np.clip(0.5 + signs * half, 0.0, 1.0)


def synth_blobs(seed: int, n_per_class: int, num_classes: int = 3, dim: int = 16, spread: float = 0.05,
                separation: float = 0.4, layout: str = "radial", robust_dims: int = 16, robust_sep: float = 0.3,
                weak_sep: float = 0.03, label_noise: float = 0.0, name: str = "blobs") -> Dataset:
    """Isotropic Gaussian clusters around fixed class centers, clipped to [0, 1].

    ``layout`` picks the centers: "radial" (:func:`blob_centers`) or "split"
    (:func:`split_centers`). ``label_noise`` reassigns that fraction of labels
    to a different, uniformly drawn class.
    """
    if dim < 2:
        raise ValueError("dim must be >= 2")
    if spread < 0:
        raise ValueError("spread must be >= 0")
    if num_classes < 2 or n_per_class < 1:
        raise ValueError("need >= 2 classes and >= 1 sample per class")
    if not 0 <= label_noise < 1:
        raise ValueError("label_noise must be in [0, 1)")
    if layout == "radial":
        centers = blob_centers(seed, num_classes, dim, separation)
    elif layout == "split":
        centers = split_centers(seed, num_classes, dim, robust_dims, robust_sep, weak_sep)
    else:
        raise ValueError(f"unknown layout {layout!r}")
    rng = Rng(seed, "blob-samples")
    labels = np.repeat(np.arange(num_classes), n_per_class)
    noise = rng.normal((labels.size, dim)) * spread
    x = np.clip(centers[labels] + noise, 0.0, 1.0)
    order = rng.permutation(labels.size)
    x, labels = x[order], labels[order]
    if label_noise > 0:
        nrng = Rng(seed, "label-noise")
        flip = nrng.uniform(size=labels.size) < label_noise
        shift = nrng.integers(1, num_classes, labels.size)
        labels = np.where(flip, (labels + shift) % num_classes, labels)
    return Dataset(x.reshape(-1, 1, 1, dim), labels, num_classes, name)


@dataclass(frozen=True)
class BatchPlan:
    batch_size: int = 64
    shuffle_seed: int = 0
    drop_last: bool = False
    shuffle: bool = True


def batches(dataset: Dataset, plan: BatchPlan, epoch: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (images, labels) over a seeded permutation; ``epoch`` reseeds the shuffle."""
    n = len(dataset)
    if plan.batch_size < 1:
        raise ValueError("batch_size must be positive")
    if plan.batch_size > n:
        raise ValueError(f"batch_size {plan.batch_size} exceeds dataset size {n}")
    for idx in batch_indices(n, plan, epoch):
        yield dataset.images[idx], dataset.labels[idx]


def batch_indices(n: int, plan: BatchPlan, epoch: int = 0) -> list[np.ndarray]:
    order = Rng(plan.shuffle_seed, f"shuffle/{epoch}").permutation(n) if plan.shuffle else np.arange(n)
    out = [order[i:i + plan.batch_size] for i in range(0, n, plan.batch_size)]
    if plan.drop_last and out and out[-1].size < plan.batch_size:
        out.pop()
    return out
