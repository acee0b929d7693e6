"""Shared numeric primitives: stable softmax, tie-broken argmax, float64-
accumulated matrix products, and the seeded random stream.

Randomness comes from a single generator type: numpy's counter-based
Philox 4x64 bit generator. A fixed seed reproduces the identical sample
stream on any platform, which every deterministic pipeline in this package
relies on. Vectors and matrices are stored as 32-bit floats; accumulation
(dot products, losses, metrics) happens in 64-bit.
"""

from __future__ import annotations

import numpy as np

from .exceptions import DimensionMismatchError


def make_rng(seed: int) -> np.random.Generator:
    """Philox-backed deterministic generator, the only RNG used here."""
    return np.random.Generator(np.random.Philox(seed))


def gaussian(rng: np.random.Generator, count: int, dtype=np.float32) -> np.ndarray:
    """i.i.d. standard-normal samples from the seeded stream."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    return rng.standard_normal(count).astype(dtype)


def softmax(v: np.ndarray) -> np.ndarray:
    """Stable softmax of a 1-D vector (max subtraction, float64 internally)."""
    v = np.asarray(v)
    if v.size == 0:
        raise ValueError("softmax of an empty vector")
    v64 = v.astype(np.float64, copy=False)
    e = np.exp(v64 - v64.max())
    return (e / e.sum()).astype(v.dtype)


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax of a 2-D array."""
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[1] == 0:
        raise ValueError(f"expected non-empty rows, got shape {m.shape}")
    m64 = m.astype(np.float64, copy=False)
    e = np.exp(m64 - m64.max(axis=1, keepdims=True))
    return (e / e.sum(axis=1, keepdims=True)).astype(m.dtype)


def argmax_tiebreak(v: np.ndarray) -> int:
    """Smallest index attaining the maximum."""
    v = np.asarray(v)
    if v.size == 0:
        raise ValueError("argmax of an empty vector")
    return int(np.argmax(v))


def argmax_rows_tiebreak(m: np.ndarray) -> np.ndarray:
    """Row-wise argmax, ties broken toward the lowest index."""
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[1] == 0:
        raise ValueError(f"expected non-empty rows, got shape {m.shape}")
    return np.argmax(m, axis=1)


def matvec(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Row-major matrix-vector product with float64 accumulation."""
    m = np.asarray(m)
    v = np.asarray(v)
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise DimensionMismatchError(
            f"matvec shapes do not align: {m.shape} x {v.shape}"
        )
    out = m.astype(np.float64, copy=False) @ v.astype(np.float64, copy=False)
    return out.astype(m.dtype)


def softplus(x):
    """log(1 + e^x), stable for large |x|."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0, x + np.log1p(np.exp(-x)), np.log1p(np.exp(x)))
