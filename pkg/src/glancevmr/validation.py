"""Shared input validation helpers."""

from __future__ import annotations

import numpy as np


class ValidationError(ValueError):
    """An input violates a documented invariant."""


def check_positive(name: str, value: float) -> None:
    if not value > 0:
        raise ValidationError(f"{name} must be > 0, got {value!r}")


def check_finite_array(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite entries")


def check_feature_matrix(name: str, arr: np.ndarray) -> None:
    """2-D, at least 1x1, all entries finite."""
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValidationError(f"{name} must be at least 1x1, got shape {arr.shape}")
    check_finite_array(name, arr)


def check_interval(name: str, start: float, end: float) -> None:
    if start > end:
        raise ValidationError(f"{name}: start {start} exceeds end {end}")


def check_probability_vector(name: str, vec: np.ndarray, tol: float = 1e-6) -> None:
    if vec.ndim != 1:
        raise ValidationError(f"{name} must be 1-D")
    if np.any(vec < 0):
        raise ValidationError(f"{name} has negative entries")
    total = float(vec.sum())
    if abs(total - 1.0) > tol:
        raise ValidationError(f"{name} sums to {total}, expected 1 within {tol}")
