"""Dense matrix utilities.

Matrices are plain row-major ``numpy.ndarray`` objects in float64. All
accumulation happens in 64-bit floating point; noise models downstream are
scale-sensitive, so accumulation error has to stay below the noise floor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["DimensionError", "as_matrix", "matmul", "ColumnStats", "column_stats"]


class DimensionError(ValueError):
    """Raised for shape mismatches or empty operands."""


def as_matrix(a) -> np.ndarray:
    """Coerce to a contiguous float64 2-D array, rejecting non-finite entries."""
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D array, got ndim={m.ndim}")
    if not np.isfinite(m).all():
        raise ValueError("matrix contains NaN or Inf")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Digital reference product with float64 accumulation."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


@dataclass(frozen=True)
class ColumnStats:
    """Per-column summary used by clipping, noise scaling, and ADC bounds."""

    max_abs: np.ndarray
    std: np.ndarray
    mean: np.ndarray


def column_stats(m: np.ndarray) -> ColumnStats:
    """Per-column max|.|, population std (divisor = rows), and mean."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise DimensionError(f"need a nonempty 2-D matrix, got shape {m.shape}")
    return ColumnStats(
        max_abs=np.abs(m).max(axis=0),
        std=m.std(axis=0),  # population std: ddof=0
        mean=m.mean(axis=0),
    )
