"""Velocity, position and orientation losses with coefficient-of-variation weighting.

Every loss accepts predictions of shape ``(..., L, 2)``. It is computed per window
(over the ``L`` rows) and then averaged over the leading window dimensions.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Mapping, NamedTuple, Sequence, Tuple

import numpy as np
from numpy.typing import ArrayLike

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor
from .validators import validate_non_negative, validate_positive

logger = logging.getLogger(__name__)

LOSS_NAMES = ("velocity", "position", "orientation")
DEFAULT_ORIENTATION_EPS = 0.05


class MaskedLoss(NamedTuple):
    value: Tensor
    masked_all: bool


def _pair(v: ArrayLike, v_gt: ArrayLike, op: str) -> Tuple[Tensor, np.ndarray]:
    v = T.as_tensor(v)
    v_gt = np.asarray(v_gt.data if isinstance(v_gt, Tensor) else v_gt, dtype=np.float64)
    if v.shape != v_gt.shape or v.ndim < 2 or v.shape[-1] != 2:
        raise ShapeError(op, v.shape, v_gt.shape)
    return v, v_gt


def _window_rms(squared_norms: Tensor) -> Tensor:
    """Mean over windows of ``sqrt(mean over rows)`` for ``(..., L)`` inputs."""

    return T.sqrt(squared_norms.mean(axis=-1)).mean()


def velocity_loss(v: ArrayLike, v_gt: ArrayLike) -> Tensor:
    """Root-mean-square planar velocity error."""

    v, v_gt = _pair(v, v_gt, "velocity_loss")
    diff = v - v_gt
    return _window_rms((diff * diff).sum(axis=-1))


def position_loss(v: ArrayLike, v_gt: ArrayLike, dt: float) -> Tensor:
    """Root-mean-square error of the positions obtained by summing ``v * dt`` within each window."""

    if not dt > 0:
        raise ValueError(f"dt must be greater than zero (value={dt})")
    v, v_gt = _pair(v, v_gt, "position_loss")
    drift = T.cumsum((v - v_gt) * dt, axis=-2)
    return _window_rms((drift * drift).sum(axis=-1))


def orientation_loss(v: ArrayLike, v_gt: ArrayLike, eps: float = DEFAULT_ORIENTATION_EPS) -> MaskedLoss:
    """Root-mean-square distance between unit velocity directions.

    Rows whose ground-truth speed is below ``eps`` are left out; a window with
    every row masked is left out of the window average. Norms in denominators
    are floored at ``eps``.
    """

    validate_positive(eps, "eps")
    v, v_gt = _pair(v, v_gt, "orientation_loss")
    gt_speed = np.linalg.norm(v_gt, axis=-1)
    mask = (gt_speed >= eps).astype(np.float64)
    counts = mask.sum(axis=-1)
    valid = counts > 0
    if not np.any(valid):
        logger.debug("orientation loss: every row is below %.3f m/s", eps)
        return MaskedLoss(Tensor(0.0), True)

    gt_unit = v_gt / np.maximum(gt_speed, eps)[..., None]
    speed = T.sqrt((v * v).sum(axis=-1, keepdims=True))
    diff = v / T.maximum(speed, eps) - gt_unit
    per_row = (diff * diff).sum(axis=-1) * mask
    per_window = T.sqrt(per_row.sum(axis=-1) * (1.0 / np.maximum(counts, 1.0)))
    value = (per_window * valid.astype(np.float64)).sum() * (1.0 / valid.sum())
    return MaskedLoss(value, False)


# ----------------------------------------------------------------------
# Coefficient-of-variation weighting
# ----------------------------------------------------------------------
@dataclass
class LossState:
    """Running (Welford) mean and population standard deviation of each raw loss."""

    names: Tuple[str, ...] = LOSS_NAMES
    warmup: int = 50
    w_min: float = 0.01
    w_max: float = 10.0
    count: Dict[str, int] = field(default_factory=dict)
    mean: Dict[str, float] = field(default_factory=dict)
    m2: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.names = tuple(self.names)
        if not self.names:
            raise ValueError("at least one loss must be enabled")
        validate_non_negative(self.warmup, "warmup")
        validate_positive(self.w_min, "w_min")
        if self.w_max < self.w_min:
            raise ValueError("w_max must not be lower than w_min")
        for name in self.names:
            self.count.setdefault(name, 0)
            self.mean.setdefault(name, 0.0)
            self.m2.setdefault(name, 0.0)

    def update(self, values: Mapping[str, float]) -> None:
        for name, value in values.items():
            if name not in self.names:
                raise KeyError(f"unknown loss '{name}'")
            value = float(value)
            if not math.isfinite(value):
                logger.warning("ignoring non-finite %s loss in the running statistics", name)
                continue
            self.count[name] += 1
            delta = value - self.mean[name]
            self.mean[name] += delta / self.count[name]
            self.m2[name] += delta * (value - self.mean[name])

    def std(self, name: str) -> float:
        count = self.count[name]
        return math.sqrt(self.m2[name] / count) if count else 0.0

    def weights(self) -> Dict[str, float]:
        weights = {}
        for name in self.names:
            if self.count[name] <= self.warmup:
                weights[name] = 1.0
                continue
            mean = self.mean[name]
            ratio = self.std(name) / mean if mean > 0 else 0.0
            weights[name] = min(max(ratio, self.w_min), self.w_max)
        return weights

    def to_dict(self) -> Dict[str, Any]:
        return {
            "names": list(self.names),
            "warmup": self.warmup,
            "w_min": self.w_min,
            "w_max": self.w_max,
            "count": dict(self.count),
            "mean": dict(self.mean),
            "m2": dict(self.m2),
        }

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "LossState":
        return cls(
            names=tuple(payload["names"]),
            warmup=int(payload["warmup"]),
            w_min=float(payload["w_min"]),
            w_max=float(payload["w_max"]),
            count={k: int(v) for k, v in payload["count"].items()},
            mean={k: float(v) for k, v in payload["mean"].items()},
            m2={k: float(v) for k, v in payload["m2"].items()},
        )


def total_loss(losses: Mapping[str, Tensor], state: LossState) -> Tensor:
    """``sum(w * L)`` with the weights taken from ``state`` as constants.

    The state is read, not updated: callers update it with the raw values first.
    """

    weights = state.weights()
    total: Tensor = Tensor(0.0)
    for name, value in losses.items():
        total = total + value * weights[name]
    return total


def compute_losses(
    v: ArrayLike,
    v_gt: ArrayLike,
    dt: float,
    names: Sequence[str] = LOSS_NAMES,
    eps: float = DEFAULT_ORIENTATION_EPS,
) -> Dict[str, Tensor]:
    """Evaluate the enabled losses; an orientation loss with every row masked is dropped."""

    losses: Dict[str, Tensor] = {}
    for name in names:
        if name == "velocity":
            losses[name] = velocity_loss(v, v_gt)
        elif name == "position":
            losses[name] = position_loss(v, v_gt, dt)
        elif name == "orientation":
            masked = orientation_loss(v, v_gt, eps)
            if not masked.masked_all:
                losses[name] = masked.value
        else:
            raise KeyError(f"unknown loss '{name}'")
    return losses
