"""Dataset ingestion: MNIST IDX files, CIFAR-10 binary batches, and a
deterministic synthetic set for fast end-to-end tests.

Loaders keep pixels in [0, 1]; per-channel standardization is a separate,
explicit step so the raw-range invariant stays checkable.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .tensor import DEFAULT_DTYPE

MNIST_IMAGE_MAGIC = 2051
MNIST_LABEL_MAGIC = 2049
CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixels


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W)
    labels: np.ndarray  # (N,) integer class ids
    num_classes: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be NCHW, got shape {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError(
                f"got {self.images.shape[0]} images but {self.labels.shape} labels")
        if not np.all(np.isfinite(self.images)):
            raise ValueError("non-finite pixel values")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(
                f"labels outside [0, {self.num_classes}): "
                f"min={self.labels.min()} max={self.labels.max()}")

    def __len__(self):
        return self.images.shape[0]

    def subset(self, n):
        n = min(n, len(self))
        return Dataset(self.images[:n], self.labels[:n], self.num_classes)


def _read_exact(f, count, path, offset):
    data = f.read(count)
    if len(data) != count:
        raise ValueError(
            f"{path}: truncated, wanted {count} bytes at offset {offset}, got {len(data)}")
    return data


def _read_be32(f, path, offset):
    return struct.unpack(">i", _read_exact(f, 4, path, offset))[0]


def load_mnist_idx(images_path, labels_path, dtype=DEFAULT_DTYPE) -> Dataset:
    """Parse the big-endian IDX pair (images magic 2051, labels magic 2049)."""
    with open(images_path, "rb") as f:
        magic = _read_be32(f, images_path, 0)
        if magic != MNIST_IMAGE_MAGIC:
            raise ValueError(
                f"{images_path}: bad magic {magic} at offset 0, expected {MNIST_IMAGE_MAGIC}")
        n = _read_be32(f, images_path, 4)
        rows = _read_be32(f, images_path, 8)
        cols = _read_be32(f, images_path, 12)
        raw = _read_exact(f, n * rows * cols, images_path, 16)
        if f.read(1):
            raise ValueError(f"{images_path}: trailing bytes after offset {16 + n * rows * cols}")
    with open(labels_path, "rb") as f:
        magic = _read_be32(f, labels_path, 0)
        if magic != MNIST_LABEL_MAGIC:
            raise ValueError(
                f"{labels_path}: bad magic {magic} at offset 0, expected {MNIST_LABEL_MAGIC}")
        n_labels = _read_be32(f, labels_path, 4)
        raw_labels = _read_exact(f, n_labels, labels_path, 8)
        if f.read(1):
            raise ValueError(f"{labels_path}: trailing bytes after offset {8 + n_labels}")
    if n != n_labels:
        raise ValueError(f"count mismatch: {n} images vs {n_labels} labels")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, rows, cols)
    labels = np.frombuffer(raw_labels, dtype=np.uint8).astype(np.int64)
    return Dataset(images.astype(dtype) / 255.0, labels, num_classes=10)


def load_cifar10_bin(batch_paths, dtype=DEFAULT_DTYPE) -> Dataset:
    """Parse CIFAR-10 binary batches (3073-byte records, R/G/B planes)."""
    if isinstance(batch_paths, (str, bytes)) or hasattr(batch_paths, "__fspath__"):
        batch_paths = [batch_paths]
    chunks, label_chunks = [], []
    for path in batch_paths:
        with open(path, "rb") as f:
            raw = f.read()
        if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES:
            raise ValueError(
                f"{path}: length {len(raw)} is not a positive multiple of {CIFAR_RECORD_BYTES}")
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        labels = records[:, 0]
        if labels.max() >= 10:
            bad = int(np.argmax(labels >= 10))
            raise ValueError(
                f"{path}: label {labels[bad]} out of range in record {bad} "
                f"(offset {bad * CIFAR_RECORD_BYTES})")
        chunks.append(records[:, 1:].reshape(-1, 3, 32, 32))
        label_chunks.append(labels.astype(np.int64))
    images = np.concatenate(chunks)
    labels = np.concatenate(label_chunks)
    return Dataset(images.astype(dtype) / 255.0, labels, num_classes=10)


def synth_dataset(seed, n, num_classes=10, image_size=28, channels=1,
                  dtype=DEFAULT_DTYPE) -> Dataset:
    """Class-dependent Gaussian blobs plus noise; easy enough that LeNet5
    reaches a few percent train error within three epochs."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, size=n)
    h = image_size
    yy, xx = np.mgrid[0:h, 0:h].astype(np.float64)
    sigma = h / 8.0
    angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
    cx = h / 2.0 + 0.30 * h * np.cos(angles)
    cy = h / 2.0 + 0.30 * h * np.sin(angles)
    blobs = np.exp(-((yy[None] - cy[:, None, None]) ** 2 +
                     (xx[None] - cx[:, None, None]) ** 2) / (2 * sigma ** 2))
    ch_scale = 0.6 + 0.4 * np.cos(angles[:, None] + 2.0 * np.pi * np.arange(channels)[None, :] / 3.0)
    images = blobs[labels][:, None, :, :] * ch_scale[labels][:, :, None, None]
    images = images + 0.05 * rng.standard_normal((n, channels, h, h))
    return Dataset(np.clip(images, 0.0, 1.0).astype(dtype), labels, num_classes)


def standardize(ds: Dataset, mean, std) -> Dataset:
    """Per-channel (x - mean) / std; returns a new dataset (may leave [0,1])."""
    c = ds.images.shape[1]
    mean = np.broadcast_to(np.asarray(mean, dtype=ds.images.dtype), (c,))
    std = np.broadcast_to(np.asarray(std, dtype=ds.images.dtype), (c,))
    images = (ds.images - mean[None, :, None, None]) / std[None, :, None, None]
    out = Dataset.__new__(Dataset)
    out.images, out.labels, out.num_classes = images, ds.labels, ds.num_classes
    return out


def batch_iter(ds: Dataset, batch_size, shuffle_seed=None, drop_last=False):
    """Yield (images, labels) batches. A fixed shuffle seed gives a fixed
    order; None means file order. drop_last discards the short tail batch
    (training mode, keeps batchnorm happy)."""
    n = len(ds)
    min_bs = 2 if drop_last else 1
    if not min_bs <= batch_size <= n:
        raise ValueError(f"batch_size {batch_size} outside [{min_bs}, {n}]")
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        order = np.random.default_rng(shuffle_seed).permutation(n)
    end = n - (n % batch_size) if drop_last else n
    for start in range(0, end, batch_size):
        idx = order[start:start + batch_size]
        yield ds.images[idx], ds.labels[idx]


def augment_flip_crop(images, rng, pad=4):
    """Random horizontal flip + pad-and-crop, the classic CIFAR recipe."""
    n, c, h, w = images.shape
    flip = rng.random(n) < 0.5
    out = images.copy()
    out[flip] = out[flip, :, :, ::-1]
    padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    for i in range(n):
        out[i] = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
    return out
