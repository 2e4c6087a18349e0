"""Trajectory reconstruction and the evaluation metrics (ATE, RTE, PDE, AYE).

Predicted and ground-truth tracks are rebased to a common start point; no
rotational alignment is applied, so heading drift shows up in every metric.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Any, Dict, Iterable, Optional, Tuple, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import SequenceTooShortError
from .utils import cumulative_integral
from .validators import ensure_finite, validate_positive

logger = logging.getLogger(__name__)

RTE_INTERVAL_S = 60.0
DEFAULT_HEADING_EPS = 0.05


@dataclass(frozen=True)
class Trajectory:
    t: NDArray[np.float64]
    positions: NDArray[np.float64]

    def __post_init__(self) -> None:
        t = ensure_finite(self.t, "t")
        positions = ensure_finite(self.positions, "positions")
        if t.ndim != 1 or positions.shape != (t.size, 2):
            raise ValueError(f"positions must have shape ({t.size}, 2), got {positions.shape}")
        if t.size == 0:
            raise ValueError("a trajectory needs at least one sample")
        if np.any(np.diff(t) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "positions", positions)

    def __len__(self) -> int:
        return int(self.t.size)

    @property
    def fs(self) -> float:
        return 1.0 / float(np.median(np.diff(self.t))) if len(self) > 1 else math.inf

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0])

    def path_length(self) -> float:
        """Polyline length of the planar track."""

        return float(np.sum(np.linalg.norm(np.diff(self.positions, axis=0), axis=1)))

    def velocity(self) -> NDArray[np.float64]:
        if len(self) < 2:
            return np.zeros_like(self.positions)
        return np.gradient(self.positions, self.t, axis=0)

    def head(self, count: int) -> "Trajectory":
        return Trajectory(self.t[:count], self.positions[:count])


TrackLike = Union[Trajectory, ArrayLike]


def _positions(track: TrackLike) -> NDArray[np.float64]:
    return track.positions if isinstance(track, Trajectory) else np.asarray(track, dtype=np.float64)


def integrate_velocity(
    velocity: ArrayLike,
    dt: float,
    origin: ArrayLike = (0.0, 0.0),
    t0: float = 0.0,
) -> Trajectory:
    """Cumulative trapezoidal integral of a planar velocity series."""

    validate_positive(dt, "dt")
    velocity = ensure_finite(velocity, "velocity")
    if velocity.ndim != 2 or velocity.shape[1] != 2 or velocity.shape[0] == 0:
        raise ValueError(f"velocity must be a non-empty (N, 2) series, got {velocity.shape}")
    positions = cumulative_integral(velocity, dt, origin)
    return Trajectory(t0 + dt * np.arange(velocity.shape[0]), positions)


def _rebased(pred: TrackLike, gt: TrackLike) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
    p, g = _positions(pred), _positions(gt)
    if p.shape != g.shape:
        raise ValueError(f"trajectory lengths differ: {p.shape[0]} vs {g.shape[0]}")
    if p.shape[0] == 0:
        raise ValueError("trajectories are empty")
    return p - p[0] + g[0], g


def ate(pred: TrackLike, gt: TrackLike) -> float:
    """Absolute trajectory error: RMSE of the position differences after rebasing."""

    p, g = _rebased(pred, gt)
    return float(np.sqrt(np.mean(np.sum((p - g) ** 2, axis=1))))


def rte(pred: TrackLike, gt: TrackLike, fs: float, interval: float = RTE_INTERVAL_S) -> float:
    """Relative trajectory error over ``interval`` seconds (``round(interval * fs)`` samples)."""

    validate_positive(fs, "fs")
    validate_positive(interval, "interval")
    p, g = _rebased(pred, gt)
    delta = int(round(interval * fs))
    if p.shape[0] <= delta:
        raise SequenceTooShortError(
            f"RTE over {interval:g}s", delta + 1, p.shape[0], hint="report ATE for shorter sequences"
        )
    error = (p[delta:] - p[:-delta]) - (g[delta:] - g[:-delta])
    return float(np.sqrt(np.mean(np.sum(error**2, axis=1))))


def pde(pred: TrackLike, gt: TrackLike) -> float:
    """Final position drift divided by the ground-truth path length."""

    p, g = _rebased(pred, gt)
    length = float(np.sum(np.linalg.norm(np.diff(g, axis=0), axis=1)))
    if length <= 0:
        raise ValueError("ground-truth path length is zero")
    return float(np.linalg.norm(p[-1] - g[-1]) / length)


def aye(pred_vel: ArrayLike, gt_vel: ArrayLike, eps: float = DEFAULT_HEADING_EPS) -> Tuple[float, float]:
    """Heading error as ``(degrees RMSE, unit-vector RMSE)``.

    Rows where the ground-truth speed is below ``eps`` are masked out.
    """

    validate_positive(eps, "eps")
    v = np.asarray(pred_vel, dtype=np.float64)
    g = np.asarray(gt_vel, dtype=np.float64)
    if v.shape != g.shape or v.ndim != 2 or v.shape[1] != 2:
        raise ValueError(f"velocity shapes differ or are not (N, 2): {v.shape} vs {g.shape}")
    gt_speed = np.linalg.norm(g, axis=1)
    mask = gt_speed >= eps
    if not np.any(mask):
        raise ValueError(f"every ground-truth speed is below {eps} m/s; heading error is undefined")
    v, g, gt_speed = v[mask], g[mask], gt_speed[mask]
    cross = v[:, 0] * g[:, 1] - v[:, 1] * g[:, 0]
    dot = np.sum(v * g, axis=1)
    degrees = np.degrees(np.arctan2(cross, dot))
    speed = np.maximum(np.linalg.norm(v, axis=1), eps)
    unit_diff = v / speed[:, None] - g / gt_speed[:, None]
    return (
        float(np.sqrt(np.mean(degrees**2))),
        float(np.sqrt(np.mean(np.sum(unit_diff**2, axis=1)))),
    )


# ----------------------------------------------------------------------
# Reports
# ----------------------------------------------------------------------
@dataclass
class MetricsReport:
    sequence_id: str
    ate: float
    rte: Optional[float]
    pde: float
    aye_deg: float
    aye_unitvec: float
    length: float
    duration: float

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def evaluate(
    pred: Trajectory,
    gt: Trajectory,
    sequence_id: str = "",
    pred_vel: Optional[ArrayLike] = None,
    gt_vel: Optional[ArrayLike] = None,
    eps: float = DEFAULT_HEADING_EPS,
    interval: float = RTE_INTERVAL_S,
) -> MetricsReport:
    """All metrics for one sequence; RTE is ``None`` when the sequence is shorter than ``interval``.

    Velocities default to the numerical derivative of each track.
    """

    pred_vel = pred.velocity() if pred_vel is None else pred_vel
    gt_vel = gt.velocity() if gt_vel is None else gt_vel
    try:
        rte_value: Optional[float] = rte(pred, gt, gt.fs, interval)
    except SequenceTooShortError as exc:
        logger.info("%s: %s", sequence_id or "sequence", exc)
        rte_value = None
    aye_deg, aye_unit = aye(pred_vel, gt_vel, eps)
    return MetricsReport(
        sequence_id=sequence_id,
        ate=ate(pred, gt),
        rte=rte_value,
        pde=pde(pred, gt),
        aye_deg=aye_deg,
        aye_unitvec=aye_unit,
        length=gt.path_length(),
        duration=gt.duration,
    )


def aggregate(reports: Iterable[MetricsReport]) -> Dict[str, Any]:
    """Mean of each metric over the sequences that report it."""

    reports = list(reports)
    summary: Dict[str, Any] = {"sequences": len(reports)}
    for name in ("ate", "rte", "pde", "aye_deg", "aye_unitvec", "length", "duration"):
        values = [getattr(report, name) for report in reports if getattr(report, name) is not None]
        summary[name] = float(np.mean(values)) if values else None
    return summary
