"""Dense float64 matrix helpers and the seeded random streams used everywhere.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. ``as_matrix``
is the single gate that enforces the shape and finiteness invariants; the other
helpers accept anything it accepts and never mutate their inputs.

Random numbers come from :class:`numpy.random.Philox` (a counter-based
generator) wrapped in a :class:`numpy.random.Generator`. The platform default
bit generator is never used, so a seed reproduces the same stream everywhere.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import DegenerateInputError, ShapeError

RNG_ALGORITHM = "philox4x64-10"


def as_matrix(data, *, copy: bool = False) -> np.ndarray:
    """Validate ``data`` as a finite rows x cols float64 matrix (rows, cols >= 1)."""
    arr = np.array(data, dtype=np.float64, copy=copy) if copy else np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got array with shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"matrix must have at least one row and column, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("matrix contains NaN or Inf entries")
    return arr


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def frobenius_norm(a) -> float:
    a = as_matrix(a)
    return float(np.sqrt(np.sum(a * a)))


def column_center(x) -> np.ndarray:
    """Subtract each column's mean. Needs at least two rows."""
    x = as_matrix(x)
    if x.shape[0] < 2:
        raise DegenerateInputError("column centering needs at least 2 rows")
    return x - x.mean(axis=0, keepdims=True)


def centering_matrix(n: int) -> np.ndarray:
    """H = I - 11^T / n."""
    return np.eye(n) - np.full((n, n), 1.0 / n)


def rng_stream(seed: int) -> np.random.Generator:
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.Philox(int(seed)))


def derive_seed(master_seed: int, *parts) -> int:
    """Split a master seed into an independent 64-bit child seed.

    The child is the first 8 bytes (little-endian) of
    ``sha256("<master>/<part1>/<part2>/...")``. Adding a new entity therefore
    never shifts the seed of any existing one.
    """
    key = "/".join([str(int(master_seed))] + [str(p) for p in parts])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")
