"""Input validation helpers shared by the estimators."""

from __future__ import annotations

from typing import Optional

import numpy as np


class SchemaError(ValueError):
    """Raised when tabular input violates the dataset schema."""

    def __init__(self, message: str, column: Optional[str] = None):
        super().__init__(message if column is None else f"column {column!r}: {message}")
        self.column = column


def as_float_matrix(x, name: str = "x") -> np.ndarray:
    a = np.asarray(x, dtype=float)
    if a.ndim == 1:
        a = a.reshape(-1, 1)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-dimensional, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


def as_float_vector(v, name: str, n: Optional[int] = None) -> np.ndarray:
    a = np.asarray(v, dtype=float).reshape(-1)
    if n is not None and a.shape[0] != n:
        raise ValueError(f"{name} has length {a.shape[0]}, expected {n}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


def as_binary(v, name: str, n: Optional[int] = None) -> np.ndarray:
    a = as_float_vector(v, name, n)
    if not np.all((a == 0.0) | (a == 1.0)):
        raise ValueError(f"{name} must be binary (0/1)")
    return a


def check_index(idx, n: int) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.intp).reshape(-1)
    if idx.size == 0:
        raise ValueError("index list is empty")
    if idx.min() < 0 or idx.max() >= n:
        raise IndexError("index out of range")
    return idx


def check_both_arms(treat: np.ndarray, min_per_arm: int = 1) -> None:
    n1 = int(np.sum(treat == 1))
    n0 = int(treat.size - n1)
    if n1 < min_per_arm or n0 < min_per_arm:
        raise ValueError(
            f"need at least {min_per_arm} sample(s) in each treatment arm, got {n0} control / {n1} treated"
        )
