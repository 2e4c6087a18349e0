"""Sequence records, CSV I/O, dataset manifests and the synthetic IMU generator."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from numpy.typing import NDArray
from scipy.interpolate import CubicSpline

from . import geom
from .errors import SequenceParseError
from .utils import GRAVITY_WORLD
from .validators import (
    ensure_disjoint,
    validate_non_negative,
    validate_positive,
    validate_positive_int,
)

logger = logging.getLogger(__name__)

NOMINAL_FS = 200.0
RATE_TOLERANCE = 0.05
UNIT_NORM_TOLERANCE = 1e-6
MIN_SECONDS_PER_WAYPOINT = 2.0

IMU_COLUMNS = (
    "t",
    "acc_x", "acc_y", "acc_z",
    "gyro_x", "gyro_y", "gyro_z",
    "mag_x", "mag_y", "mag_z",
    "qw", "qx", "qy", "qz",
)
POSITION_COLUMNS = ("pos_x", "pos_y", "pos_z")

SPLITS = ("train", "validation", "test_seen", "test_unseen")
DEFAULT_RATIOS = (15, 3, 3, 4)


def _first_irregular_step(t: NDArray[np.float64], fs: float) -> Optional[int]:
    """Index of the first sample whose spacing breaks monotonicity or the rate tolerance."""

    dt = np.diff(t)
    bad = (dt <= 0) | (np.abs(dt * fs - 1.0) > RATE_TOLERANCE)
    hits = np.flatnonzero(bad)
    return int(hits[0]) + 1 if hits.size else None


def _estimate_fs(t: NDArray[np.float64]) -> float:
    if t.size < 2:
        return NOMINAL_FS
    step = float(np.median(np.diff(t)))
    return 1.0 / step if step > 0 else NOMINAL_FS


def _frozen(array: NDArray[np.float64]) -> NDArray[np.float64]:
    array = np.array(array, dtype=np.float64, copy=True)
    array.flags.writeable = False
    return array


@dataclass(frozen=True)
class ImuSample:
    t: float
    acc: NDArray[np.float64]
    gyro: NDArray[np.float64]
    mag: NDArray[np.float64]
    orient: NDArray[np.float64]
    gt_pos: Optional[NDArray[np.float64]] = None


@dataclass(frozen=True, eq=False)
class SequenceRecord:
    """One recording stored column-wise; arrays are read-only after construction."""

    id: str
    t: NDArray[np.float64]
    acc: NDArray[np.float64]
    gyro: NDArray[np.float64]
    mag: NDArray[np.float64]
    orient: NDArray[np.float64]
    gt_pos: Optional[NDArray[np.float64]] = None
    fs: Optional[float] = None

    def __post_init__(self) -> None:
        t = np.asarray(self.t, dtype=np.float64)
        if t.ndim != 1 or t.size == 0:
            raise ValueError("a sequence needs at least one sample")
        n = t.size
        arrays = {"acc": 3, "gyro": 3, "mag": 3, "orient": 4}
        if self.gt_pos is not None:
            arrays["gt_pos"] = 3
        for name, width in arrays.items():
            value = np.asarray(getattr(self, name), dtype=np.float64)
            if value.shape != (n, width):
                raise ValueError(f"{name} must have shape ({n}, {width}), got {value.shape}")
            if not np.all(np.isfinite(value)):
                raise ValueError(f"{name} contains non-finite values")
            object.__setattr__(self, name, _frozen(value))
        if not np.all(np.isfinite(t)):
            raise ValueError("t contains non-finite values")
        object.__setattr__(self, "t", _frozen(t))

        fs = _estimate_fs(t) if self.fs is None else validate_positive(float(self.fs), "fs")
        object.__setattr__(self, "fs", fs)
        irregular = _first_irregular_step(t, fs)
        if irregular is not None:
            raise ValueError(f"timestamps must increase at {fs:.3f} Hz ±5% (sample {irregular})")
        norms = np.linalg.norm(self.orient, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOLERANCE):
            raise ValueError("orientation quaternions must be unit norm")

    def __len__(self) -> int:
        return int(self.t.size)

    @property
    def has_ground_truth(self) -> bool:
        return self.gt_pos is not None

    @property
    def dt(self) -> float:
        return 1.0 / float(self.fs)

    def sample(self, index: int) -> ImuSample:
        return ImuSample(
            t=float(self.t[index]),
            acc=self.acc[index],
            gyro=self.gyro[index],
            mag=self.mag[index],
            orient=self.orient[index],
            gt_pos=None if self.gt_pos is None else self.gt_pos[index],
        )

    @property
    def samples(self) -> List[ImuSample]:
        return [self.sample(index) for index in range(len(self))]

    def head(self, count: int) -> "SequenceRecord":
        """Return the first ``count`` samples as a new record."""

        return replace(
            self,
            t=self.t[:count],
            acc=self.acc[:count],
            gyro=self.gyro[:count],
            mag=self.mag[:count],
            orient=self.orient[:count],
            gt_pos=None if self.gt_pos is None else self.gt_pos[:count],
        )


# ----------------------------------------------------------------------
# CSV I/O
# ----------------------------------------------------------------------
def _parse_column(cells: Sequence[str], name: str) -> NDArray[np.float64]:
    values = np.empty(len(cells), dtype=np.float64)
    for row, cell in enumerate(cells):
        try:
            value = float(cell)
        except ValueError:
            raise SequenceParseError(f"invalid value '{cell}'", row=row + 1, column=name) from None
        if not math.isfinite(value):
            raise SequenceParseError(f"non-finite value '{cell}'", row=row + 1, column=name)
        values[row] = value
    return values


def load_sequence(
    path: str | Path,
    sequence_id: Optional[str] = None,
    nominal_fs: Optional[float] = NOMINAL_FS,
) -> SequenceRecord:
    """Parse a sequence CSV, reporting the offending row/column on failure.

    The sampling rate must lie within ±5% of ``nominal_fs``; ``None`` accepts any
    uniform rate.
    """

    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError as exc:
        raise SequenceParseError(f"{path} is empty") from exc

    columns = tuple(frame.columns)
    if columns[: len(IMU_COLUMNS)] != IMU_COLUMNS:
        missing = [name for name in IMU_COLUMNS if name not in columns]
        column = missing[0] if missing else None
        raise SequenceParseError(f"header must start with {','.join(IMU_COLUMNS)}", column=column)
    extra = columns[len(IMU_COLUMNS):]
    if extra not in ((), POSITION_COLUMNS):
        raise SequenceParseError(
            f"position columns must be exactly {','.join(POSITION_COLUMNS)} or absent, got {','.join(extra)}"
        )
    if frame.empty:
        raise SequenceParseError(f"{path} has a header but no samples")

    values = np.empty(frame.shape, dtype=np.float64)
    for position, name in enumerate(columns):
        values[:, position] = _parse_column(frame[name].tolist(), name)

    t = values[:, 0]
    decreasing = np.flatnonzero(np.diff(t) <= 0)
    if decreasing.size:
        raise SequenceParseError("timestamps must be strictly increasing", row=int(decreasing[0]) + 2, column="t")
    fs = _estimate_fs(t)
    irregular = _first_irregular_step(t, fs)
    if irregular is not None:
        raise SequenceParseError(f"sampling interval deviates more than 5% from {fs:.3f} Hz", row=irregular + 1, column="t")
    off_rate = nominal_fs is not None and abs(fs / validate_positive(nominal_fs, "nominal_fs") - 1.0) > RATE_TOLERANCE
    if off_rate and t.size > 1:
        raise SequenceParseError(
            f"sampling rate {fs:.3f} Hz deviates more than 5% from the nominal {nominal_fs:.3f} Hz", column="t"
        )

    orient = values[:, 10:14]
    off_norm = np.flatnonzero(np.abs(np.linalg.norm(orient, axis=1) - 1.0) > UNIT_NORM_TOLERANCE)
    if off_norm.size:
        raise SequenceParseError("orientation quaternion is not unit norm", row=int(off_norm[0]) + 1, column="qw")

    return SequenceRecord(
        id=sequence_id or path.stem,
        t=t,
        acc=values[:, 1:4],
        gyro=values[:, 4:7],
        mag=values[:, 7:10],
        orient=orient,
        gt_pos=values[:, 14:17] if extra else None,
        fs=fs,
    )


def save_sequence(record: SequenceRecord, path: str | Path) -> None:
    if len(record) == 0:
        raise ValueError("refusing to write a sequence without samples")
    blocks = [record.t[:, None], record.acc, record.gyro, record.mag, record.orient]
    columns = list(IMU_COLUMNS)
    if record.gt_pos is not None:
        blocks.append(record.gt_pos)
        columns.extend(POSITION_COLUMNS)
    frame = pd.DataFrame(np.hstack(blocks), columns=columns)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n")


# ----------------------------------------------------------------------
# Manifests
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class DatasetManifest:
    train: Tuple[str, ...] = ()
    validation: Tuple[str, ...] = ()
    test_seen: Tuple[str, ...] = ()
    test_unseen: Tuple[str, ...] = ()

    def __post_init__(self) -> None:
        for name in SPLITS:
            object.__setattr__(self, name, tuple(str(item) for item in getattr(self, name)))
        ensure_disjoint({name: getattr(self, name) for name in SPLITS})

    def split(self, name: str) -> Tuple[str, ...]:
        if name not in SPLITS:
            raise ValueError(f"unknown split '{name}', expected one of {', '.join(SPLITS)}")
        return getattr(self, name)

    def sizes(self) -> Dict[str, int]:
        return {name: len(getattr(self, name)) for name in SPLITS}


def split_manifest(
    sequences: Sequence[str],
    ratios: Sequence[float] = DEFAULT_RATIOS,
    seed: int = 0,
) -> DatasetManifest:
    """Deterministically assign sequences to the four splits honoring ``ratios``."""

    if len(ratios) != len(SPLITS):
        raise ValueError(f"ratios must have {len(SPLITS)} entries")
    for ratio in ratios:
        validate_positive(float(ratio), "ratio")
    total = len(sequences)
    if total < len(SPLITS):
        raise ValueError(f"need at least {len(SPLITS)} sequences to fill every split, got {total}")

    weights = np.asarray(ratios, dtype=np.float64)
    exact = total * weights / weights.sum()
    sizes = np.floor(exact).astype(int)
    # largest remainder, ties broken by split order
    for index in np.argsort(-(exact - sizes), kind="stable")[: total - int(sizes.sum())]:
        sizes[index] += 1
    while np.any(sizes == 0):
        sizes[int(np.argmax(sizes))] -= 1
        sizes[int(np.argmin(sizes))] += 1

    order = np.random.default_rng(seed).permutation(total)
    shuffled = [str(sequences[index]) for index in order]
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    parts = {name: tuple(shuffled[bounds[i]:bounds[i + 1]]) for i, name in enumerate(SPLITS)}
    return DatasetManifest(**parts)


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    lines = [f"{name}\t{item}" for name in SPLITS for item in manifest.split(name)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: str | Path) -> DatasetManifest:
    """Read ``split<TAB>path`` lines; relative paths resolve against the manifest directory."""

    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    parts: Dict[str, List[str]] = {name: [] for name in SPLITS}
    for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        split, sep, item = line.partition("\t")
        if not sep or split not in parts:
            raise ValueError(f"{path}:{number}: expected 'split<TAB>path' with a known split")
        item_path = Path(item)
        if not item_path.is_absolute():
            item_path = path.parent / item_path
        parts[split].append(str(item_path))
    return DatasetManifest(**parts)


# ----------------------------------------------------------------------
# Synthetic generator
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class DistortionPatch:
    """Localized additive perturbation of the world magnetic field."""

    center: Tuple[float, float]
    radius: float
    amplitude: Tuple[float, float, float]

    def __post_init__(self) -> None:
        validate_positive(self.radius, "radius")

    def field(self, positions: NDArray[np.float64]) -> NDArray[np.float64]:
        offset = positions[:, :2] - np.asarray(self.center, dtype=np.float64)
        weight = np.exp(-np.sum(offset**2, axis=1) / (2.0 * self.radius**2))
        return weight[:, None] * np.asarray(self.amplitude, dtype=np.float64)


@dataclass(frozen=True)
class SynthParams:
    duration: float = 60.0
    fs: float = NOMINAL_FS
    max_speed: float = 1.5
    n_waypoints: int = 8
    arena: float = 20.0
    yaw_oscillation: float = 0.05
    yaw_oscillation_hz: float = 0.5
    tilt_amplitude: float = 0.0
    acc_noise: float = 0.0
    gyro_noise: float = 0.0
    mag_noise: float = 0.0
    acc_bias: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    gyro_bias: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    mag_bias: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    world_mag: Tuple[float, float, float] = (20.0, 0.0, -40.0)
    distortion: Tuple[DistortionPatch, ...] = field(default_factory=tuple)
    seed: int = 0

    def __post_init__(self) -> None:
        validate_positive(self.duration, "duration")
        validate_positive(self.fs, "fs")
        validate_positive(self.max_speed, "max_speed")
        validate_positive(self.arena, "arena")
        validate_positive_int(self.n_waypoints, "n_waypoints")
        for name in ("acc_noise", "gyro_noise", "mag_noise", "yaw_oscillation", "tilt_amplitude"):
            validate_non_negative(getattr(self, name), name)
        if self.n_waypoints > 1 and self.duration < MIN_SECONDS_PER_WAYPOINT * (self.n_waypoints - 1):
            raise ValueError(
                f"duration {self.duration}s is too short for {self.n_waypoints} waypoints "
                f"(need {MIN_SECONDS_PER_WAYPOINT}s between waypoints)"
            )


@dataclass(frozen=True)
class _Motion:
    position: NDArray[np.float64]
    acceleration: NDArray[np.float64]
    roll: NDArray[np.float64]
    pitch: NDArray[np.float64]
    yaw: NDArray[np.float64]
    body_rate: NDArray[np.float64]


def _planar_path(params: SynthParams, rng: np.random.Generator, t: NDArray[np.float64]):
    half = 0.5 * params.arena
    waypoints = rng.uniform(-half, half, size=(params.n_waypoints, 2))
    if params.n_waypoints == 1:
        position = np.repeat(waypoints, t.size, axis=0)
        return position, np.zeros_like(position), None

    knots = np.linspace(0.0, params.duration, params.n_waypoints)
    spline = CubicSpline(knots, waypoints, bc_type="clamped")
    dense = np.linspace(0.0, params.duration, int(params.duration * 100) + 1)
    peak = float(np.max(np.linalg.norm(spline(dense, 1), axis=1)))
    # 2% headroom for maxima falling between dense grid points
    scale = min(1.0, 0.98 * params.max_speed / peak) if peak > 0 else 1.0

    def shaped(times: NDArray[np.float64], order: int) -> NDArray[np.float64]:
        value = scale * spline(times, order)
        return value + (1.0 - scale) * waypoints[0] if order == 0 else value

    return shaped(t, 0), shaped(t, 2), shaped


def _heading(params: SynthParams, shaped, initial_yaw: float) -> CubicSpline:
    grid = np.linspace(0.0, params.duration, max(int(params.duration / 0.5), 1) + 1)
    if shaped is None:
        return CubicSpline(grid, np.full(grid.size, initial_yaw), bc_type="clamped")
    velocity = shaped(grid, 1)
    speed = np.linalg.norm(velocity, axis=1)
    moving = speed > 0.05 * speed.max()
    angles = np.unwrap(np.arctan2(velocity[moving, 1], velocity[moving, 0]))
    return CubicSpline(grid, np.interp(grid, grid[moving], angles), bc_type="clamped")


def _motion(params: SynthParams, rng: np.random.Generator, t: NDArray[np.float64]) -> _Motion:
    position, acceleration, shaped = _planar_path(params, rng, t)
    heading = _heading(params, shaped, float(rng.uniform(-np.pi, np.pi)))

    omega = 2.0 * np.pi * params.yaw_oscillation_hz
    yaw = heading(t) + params.yaw_oscillation * np.sin(omega * t)
    yaw_rate = heading(t, 1) + params.yaw_oscillation * omega * np.cos(omega * t)

    roll_w, pitch_w = 2.0 * np.pi * 0.3, 2.0 * np.pi * 0.2
    roll = params.tilt_amplitude * np.sin(roll_w * t)
    pitch = params.tilt_amplitude * np.sin(pitch_w * t + 0.7)
    roll_rate = params.tilt_amplitude * roll_w * np.cos(roll_w * t)
    pitch_rate = params.tilt_amplitude * pitch_w * np.cos(pitch_w * t + 0.7)

    # body rates of a ZYX (yaw-pitch-roll) attitude
    body_rate = np.stack(
        [
            roll_rate - yaw_rate * np.sin(pitch),
            pitch_rate * np.cos(roll) + yaw_rate * np.cos(pitch) * np.sin(roll),
            -pitch_rate * np.sin(roll) + yaw_rate * np.cos(pitch) * np.cos(roll),
        ],
        axis=1,
    )
    zeros = np.zeros((t.size, 1))
    return _Motion(
        position=np.hstack([position, zeros]),
        acceleration=np.hstack([acceleration, zeros]),
        roll=roll,
        pitch=pitch,
        yaw=yaw,
        body_rate=body_rate,
    )


def synth_sequence(params: SynthParams, sequence_id: Optional[str] = None) -> SequenceRecord:
    """Generate a planar trajectory and the IMU readings a body-mounted sensor would see."""

    rng = np.random.default_rng(params.seed)
    n = int(round(params.duration * params.fs)) + 1
    t = np.arange(n) / params.fs
    motion = _motion(params, rng, t)

    orient = geom.quat_normalize(geom.quat_from_euler(motion.roll, motion.pitch, motion.yaw))
    to_body = geom.quat_conjugate(orient)

    world_field = np.broadcast_to(np.asarray(params.world_mag, dtype=np.float64), (n, 3)).copy()
    for patch in params.distortion:
        world_field += patch.field(motion.position)

    acc = geom.quat_rotate(to_body, motion.acceleration + GRAVITY_WORLD)
    gyro = motion.body_rate.copy()
    mag = geom.quat_rotate(to_body, world_field)

    acc += rng.normal(0.0, params.acc_noise, size=(n, 3)) + np.asarray(params.acc_bias)
    gyro += rng.normal(0.0, params.gyro_noise, size=(n, 3)) + np.asarray(params.gyro_bias)
    mag += rng.normal(0.0, params.mag_noise, size=(n, 3)) + np.asarray(params.mag_bias)

    logger.debug("synthesized %d samples (seed=%d)", n, params.seed)
    return SequenceRecord(
        id=sequence_id or f"synth-{params.seed}",
        t=t,
        acc=acc,
        gyro=gyro,
        mag=mag,
        orient=orient,
        gt_pos=motion.position,
        fs=params.fs,
    )


def world_acceleration(params: SynthParams) -> NDArray[np.float64]:
    """Noise-free world-frame acceleration of the path ``synth_sequence`` draws for ``params``."""

    rng = np.random.default_rng(params.seed)
    n = int(round(params.duration * params.fs)) + 1
    return _motion(params, rng, np.arange(n) / params.fs).acceleration
