"""Dense tensor primitives shared by layers, criteria and test oracles.

Tensors are plain numpy arrays (float64 by default, float32 selectable).
Broadcasting is deliberately not part of the arithmetic surface here: every
operation checks exact shape agreement so that pruning-induced shape drift
fails loudly instead of being silently coerced.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float64


def as_tensor(data, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Build a dense tensor from nested lists / arrays."""
    return np.asarray(data, dtype=dtype)


def zeros(shape, dtype=DEFAULT_DTYPE) -> np.ndarray:
    return np.zeros(shape, dtype=dtype)


def _require_same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def elementwise_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hadamard product. Shapes must match exactly (no broadcasting)."""
    _require_same_shape(a, b, "elementwise_mul")
    return a * b


def l1_norm(a: np.ndarray) -> float:
    """Sum of absolute values over all entries."""
    return float(np.abs(a).sum())


def l2_norm(a: np.ndarray) -> float:
    """Euclidean norm over all entries."""
    return float(np.sqrt((a * a).sum()))


def _check_index_list(keep, bound: int, op: str) -> np.ndarray:
    idx = np.asarray(keep, dtype=np.intp).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= bound):
        raise ValueError(f"{op}: index out of range for axis of size {bound}: {keep}")
    if idx.size > 1 and not np.all(np.diff(idx) > 0):
        raise ValueError(f"{op}: indices must be strictly increasing: {keep}")
    return idx


def slice_axis0(a: np.ndarray, keep) -> np.ndarray:
    """Copy of `a` keeping only the given rows along axis 0.

    `keep` must be strictly increasing and in range. An empty keep list is
    legal and yields a zero-row tensor; layers reject such tensors at
    forward time.
    """
    idx = _check_index_list(keep, a.shape[0], "slice_axis0")
    return a[idx].copy()


def slice_axis(a: np.ndarray, keep, axis: int) -> np.ndarray:
    """Like slice_axis0 but along an arbitrary axis (used for input channels)."""
    idx = _check_index_list(keep, a.shape[axis], "slice_axis")
    return np.take(a, idx, axis=axis)
