"""Utility helpers used across the toolkit.

These helpers keep angle wrapping, JSON emission and integration consistent
between the baselines, the metrics and the training log.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Mapping

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.integrate import cumulative_trapezoid

GRAVITY = 9.81
GRAVITY_WORLD = np.array([0.0, 0.0, GRAVITY])


def wrap_angle(angle: ArrayLike) -> NDArray[np.float64]:
    """Wrap ``angle`` (radians) into ``[-pi, pi)``."""

    return (np.asarray(angle, dtype=np.float64) + np.pi) % (2.0 * np.pi) - np.pi


def canonical_json(payload: Mapping[str, Any]) -> str:
    """Return a deterministic JSON rendering (sorted keys, no whitespace)."""

    return json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_json(payload: Any, path: str | Path) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cumulative_integral(values: NDArray[np.float64], dt: float, initial: ArrayLike = 0.0) -> NDArray[np.float64]:
    """Cumulative trapezoidal integral along axis 0 starting at ``initial``."""

    integral = cumulative_trapezoid(values, dx=dt, axis=0, initial=0.0)
    return integral + np.asarray(initial, dtype=np.float64)


def rms(values: NDArray[np.float64]) -> float:
    return float(np.sqrt(np.mean(np.square(values))))
