"""Validation helpers shared by the configuration objects and numeric routines."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import ShapeError


def validate_positive(value: float, name: str) -> float:
    if not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be greater than zero (value={value})")
    return value


def validate_positive_int(value: int, name: str) -> int:
    if int(value) != value or value <= 0:
        raise ValueError(f"{name} must be a positive integer (value={value})")
    return int(value)


def validate_non_negative(value: float, name: str) -> float:
    if not np.isfinite(value) or value < 0:
        raise ValueError(f"{name} cannot be negative (value={value})")
    return value


def validate_rate(value: float, name: str) -> float:
    if value < 0:
        raise ValueError(f"{name} cannot be negative")
    if value >= 1:
        raise ValueError(f"{name} must be lower than 1")
    return value


def validate_odd(value: int, name: str) -> int:
    value = validate_positive_int(value, name)
    if value % 2 == 0:
        raise ValueError(f"{name} must be odd (value={value})")
    return value


def validate_range(value: float, name: str, lower: float, upper: float) -> float:
    if not lower < value < upper:
        raise ValueError(f"{name} must lie in ({lower}, {upper}) (value={value})")
    return value


def ensure_finite(values: ArrayLike, name: str) -> NDArray[np.float64]:
    array = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(array)):
        raise ValueError(f"{name} contains non-finite values")
    return array


def ensure_shape(array: NDArray[np.float64], trailing: Sequence[int], op: str) -> NDArray[np.float64]:
    """Check the trailing dimensions of ``array`` against ``trailing``."""

    if array.ndim < len(trailing) or tuple(array.shape[array.ndim - len(trailing):]) != tuple(trailing):
        raise ShapeError(op, array.shape, tuple(trailing))
    return array


def ensure_disjoint(groups: dict[str, Iterable[str]]) -> None:
    seen: dict[str, str] = {}
    for group, items in groups.items():
        for item in items:
            if item in seen:
                raise ValueError(f"'{item}' appears in both {seen[item]} and {group}")
            seen[item] = group
