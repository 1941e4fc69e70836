"""Datasets: two moons, Gaussian blobs, 8x8 digits and IDX files."""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IDXFormatError(ValueError):
    pass


@dataclass
class Dataset:
    """Inputs of shape (N, d) or (N, c, h, w) with integer labels.

    ``mean``/``std`` are per-feature standardization statistics; they are
    recorded, and applied only by :meth:`standardized`.
    """

    inputs: np.ndarray
    labels: np.ndarray
    split: str = "train"
    num_classes: int | None = None
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) == 0:
            raise ValueError("dataset is empty")
        if len(self.inputs) != len(self.labels):
            raise ValueError("inputs and labels have different lengths")
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError("labels out of range")
        if self.mean is None:
            self.mean = self.inputs.mean(axis=0)
            self.std = self.inputs.std(axis=0)

    def __len__(self):
        return len(self.inputs)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.inputs.shape[1:]

    def subset(self, idx, split: str | None = None) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], split or self.split, self.num_classes)

    def standardized(self, mean=None, std=None) -> "Dataset":
        mean = self.mean if mean is None else mean
        std = self.std if std is None else std
        safe = np.where(std > 0, std, 1.0)
        return replace(self, inputs=(self.inputs - mean) / safe, mean=mean, std=std)

    def batches(self, batch_size: int, rng: np.random.Generator | None = None):
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for lo in range(0, len(self), batch_size):
            idx = order[lo : lo + batch_size]
            yield self.inputs[idx], self.labels[idx]


def train_test_split(data: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    perm = np.random.default_rng(seed).permutation(len(data))
    n_test = int(round(len(data) * test_fraction))
    return data.subset(np.sort(perm[n_test:]), "train"), data.subset(np.sort(perm[:n_test]), "test")


def moon_arcs(t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free points of the upper and lower moon at parameters ``t``."""
    upper = np.stack([np.cos(t), np.sin(t)], axis=1)
    lower = np.stack([np.cos(t) + 0.5, -np.sin(t) - 0.25], axis=1)
    return upper, lower


def two_moons(n: int, noise_std: float = 0.1, seed: int = 0, split: str = "train") -> Dataset:
    """Two interleaving unit half-circles; the lower one shifted by (0.5, -0.25)."""
    if n <= 0:
        raise ValueError("n must be positive")
    if n % 2:
        raise ValueError("n must be even")
    if noise_std < 0:
        raise ValueError("noise_std must be non-negative")
    rng = np.random.default_rng(seed)
    t = np.linspace(0.0, np.pi, n // 2)
    upper, lower = moon_arcs(t)
    x = np.concatenate([upper, lower])
    y = np.concatenate([np.zeros(n // 2, dtype=np.int64), np.ones(n // 2, dtype=np.int64)])
    if noise_std > 0:
        x = x + rng.normal(scale=noise_std, size=x.shape)
    perm = rng.permutation(n)
    return Dataset(x[perm], y[perm], split, 2)


def moons_split(n_train: int = 1000, n_test: int = 1000, noise_std: float = 0.1,
                seed: int = 0) -> tuple[Dataset, Dataset]:
    train = two_moons(n_train, noise_std, seed, "train")
    test = two_moons(n_test, noise_std, seed + 1, "test")
    return train, test


def blobs(n: int, num_classes: int = 4, size: int = 8, noise_std: float = 0.3,
          seed: int = 0, split: str = "train") -> Dataset:
    """Synthetic single-channel images: a class-specific Gaussian bump plus pixel noise."""
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    centers = np.random.default_rng(12345).uniform(1, size - 2, (num_classes, 2))
    yy, xx = np.mgrid[0:size, 0:size]
    templates = np.exp(-((yy[None] - centers[:, 0, None, None]) ** 2
                         + (xx[None] - centers[:, 1, None, None]) ** 2) / 4.0)
    labels = rng.integers(0, num_classes, n)
    imgs = templates[labels] + rng.normal(scale=noise_std, size=(n, size, size))
    return Dataset(np.clip(imgs, 0, 1)[:, None], labels, split, num_classes)


def digits(test_fraction: float = 1 / 3, seed: int = 0) -> tuple[Dataset, Dataset]:
    """The 8x8 handwritten-digit images bundled with scikit-learn, scaled to [0, 1]."""
    from sklearn.datasets import load_digits

    raw = load_digits()
    data = Dataset(raw.images[:, None] / 16.0, raw.target, "all", 10)
    return train_test_split(data, test_fraction, seed)


# -- IDX ----------------------------------------------------------------------------------


def _read_idx(path, magic: int) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 4:
        raise IDXFormatError(f"{path}: truncated header")
    (found,) = struct.unpack(">I", buf[:4])
    if found != magic:
        raise IDXFormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(buf) < head:
        raise IDXFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", buf[4:head])
    count = int(np.prod(dims))
    if len(buf) - head < count:
        raise IDXFormatError(f"{path}: truncated data ({len(buf) - head} of {count} bytes)")
    if len(buf) - head > count:
        raise IDXFormatError(f"{path}: {len(buf) - head - count} trailing bytes")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=head).reshape(dims)


def load_idx(images_path, labels_path, split: str = "train", num_classes: int | None = None) -> Dataset:
    """Read unsigned-byte IDX image/label files; pixels are scaled to [0, 1]."""
    images = _read_idx(images_path, IMAGES_MAGIC)
    labels = _read_idx(labels_path, LABELS_MAGIC)
    if len(images) != len(labels):
        raise IDXFormatError(f"{len(images)} images but {len(labels)} labels")
    if len(images) == 0:
        raise IDXFormatError("IDX files contain no items")
    return Dataset(images[:, None].astype(np.float64) / 255.0, labels.astype(np.int64), split,
                   num_classes)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images (N, h, w) and labels (N,) as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    Path(images_path).write_bytes(struct.pack(">I3I", IMAGES_MAGIC, *images.shape) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", LABELS_MAGIC, len(labels)) + labels.tobytes())


DATASETS = ("two-moons", "digits", "blobs", "idx")
