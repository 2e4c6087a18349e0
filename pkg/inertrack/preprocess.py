"""Feature extraction: heading-agnostic frame, magnetometer derivative, windows and segments."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray
from scipy.signal import butter, filtfilt

from . import geom
from .errors import SequenceTooShortError
from .ingest import NOMINAL_FS, SequenceRecord, load_sequence
from .utils import GRAVITY_WORLD
from .validators import ensure_finite, validate_positive, validate_positive_int

logger = logging.getLogger(__name__)

CHANNELS = (
    "acc_g_x", "acc_g_y", "acc_g_z",
    "gyro_g_x", "gyro_g_y", "gyro_g_z",
    "dmag_b_x", "dmag_b_y", "dmag_b_z",
)
RAW_MAG_CHANNELS = ("mag_b_x", "mag_b_y", "mag_b_z")
N_CHANNELS = len(CHANNELS)
# magnetometer input: body-frame time derivative, or the body-frame field itself
MAG_FEATURES = ("derivative", "raw")
# channel pairs living on the floor plane, rotated together by yaw augmentation
PLANAR_PAIRS = ((0, 1), (3, 4))


@dataclass(frozen=True)
class FeatureWindow:
    features: NDArray[np.float64]
    gt_vel: Optional[NDArray[np.float64]]
    t0: float
    sequence_id: str
    index: int
    offset: int
    fs: float

    def __post_init__(self) -> None:
        features = ensure_finite(self.features, "features")
        if features.ndim != 2 or features.shape[1] != N_CHANNELS:
            raise ValueError(f"features must have shape (L, {N_CHANNELS}), got {features.shape}")
        object.__setattr__(self, "features", features)
        if self.gt_vel is not None:
            gt_vel = ensure_finite(self.gt_vel, "gt_vel")
            if gt_vel.shape != (features.shape[0], 2):
                raise ValueError(f"gt_vel must have shape ({features.shape[0]}, 2), got {gt_vel.shape}")
            object.__setattr__(self, "gt_vel", gt_vel)

    @property
    def length(self) -> int:
        return int(self.features.shape[0])


@dataclass(frozen=True)
class SegmentSample:
    """``S`` adjacent windows of one sequence; the unit of truncated backpropagation."""

    windows: Tuple[FeatureWindow, ...]

    def __post_init__(self) -> None:
        windows = tuple(self.windows)
        if not windows:
            raise ValueError("a segment needs at least one window")
        first = windows[0]
        for previous, current in zip(windows, windows[1:]):
            if current.sequence_id != first.sequence_id or current.length != first.length:
                raise ValueError("segment windows must come from one sequence and share L")
            if current.offset != previous.offset + previous.length:
                raise ValueError(
                    f"segment windows are not contiguous (offset {previous.offset} then {current.offset})"
                )
        object.__setattr__(self, "windows", windows)

    def __len__(self) -> int:
        return len(self.windows)

    @property
    def features(self) -> NDArray[np.float64]:
        return np.stack([window.features for window in self.windows])

    @property
    def gt_vel(self) -> NDArray[np.float64]:
        if any(window.gt_vel is None for window in self.windows):
            raise ValueError(f"segment of {self.sequence_id} has no ground-truth velocity")
        return np.stack([window.gt_vel for window in self.windows])

    @property
    def sequence_id(self) -> str:
        return self.windows[0].sequence_id

    @property
    def start(self) -> int:
        return self.windows[0].offset

    @property
    def fs(self) -> float:
        return self.windows[0].fs


# ----------------------------------------------------------------------
# Streams
# ----------------------------------------------------------------------
def to_heading_agnostic(record: SequenceRecord) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Rotate accelerations and angular rates into the gravity-aligned frame.

    Gravity is removed from the rotated acceleration.
    """

    if record.orient is None:
        raise ValueError(f"{record.id} has no orientation stream")
    acc_g = geom.quat_rotate(record.orient, record.acc) - GRAVITY_WORLD
    gyro_g = geom.quat_rotate(record.orient, record.gyro)
    return acc_g, gyro_g


def channel_names(mag_feature: str = "derivative") -> Tuple[str, ...]:
    if mag_feature not in MAG_FEATURES:
        raise ValueError(f"mag_feature must be one of {', '.join(MAG_FEATURES)}, got '{mag_feature}'")
    return CHANNELS if mag_feature == "derivative" else CHANNELS[:6] + RAW_MAG_CHANNELS


def smoothed_mag(
    record: SequenceRecord,
    cutoff_hz: Optional[float] = None,
    filter_order: int = 2,
) -> NDArray[np.float64]:
    """Body-frame magnetometer, optionally through a zero-phase Butterworth low-pass."""

    mag = np.asarray(record.mag)
    if cutoff_hz is None:
        return mag
    nyquist = 0.5 * record.fs
    validate_positive(cutoff_hz, "cutoff_hz")
    if cutoff_hz >= nyquist:
        raise ValueError(f"cutoff_hz must be below the Nyquist rate {nyquist}")
    b, a = butter(filter_order, cutoff_hz / nyquist)
    return filtfilt(b, a, mag, axis=0, padlen=min(3 * max(len(a), len(b)), len(record) - 1))


def mag_body_derivative(
    record: SequenceRecord,
    cutoff_hz: Optional[float] = None,
    filter_order: int = 2,
) -> NDArray[np.float64]:
    """Time derivative of the body-frame magnetometer (µT/s).

    Central differences inside the sequence, one-sided at both ends. With
    ``cutoff_hz`` the field is first smoothed by a zero-phase Butterworth low-pass.
    """

    if len(record) < 3:
        raise SequenceTooShortError("magnetometer derivative", 3, len(record))
    return np.gradient(smoothed_mag(record, cutoff_hz, filter_order), axis=0, edge_order=1) * record.fs


def gt_velocity(record: SequenceRecord, stride: int = 1) -> NDArray[np.float64]:
    """Planar ground-truth velocity from central differences of ``gt_pos`` over ``stride`` samples."""

    if record.gt_pos is None:
        raise ValueError(f"{record.id} has no ground-truth positions")
    stride = validate_positive_int(stride, "stride")
    n = len(record)
    if n <= 2 * stride:
        raise SequenceTooShortError("ground-truth velocity", 2 * stride + 1, n)
    pos = record.gt_pos[:, :2]
    vel = np.empty((n, 2), dtype=np.float64)
    scale = record.fs / stride
    vel[stride:n - stride] = (pos[2 * stride:] - pos[:-2 * stride]) * (0.5 * scale)
    vel[:stride] = (pos[stride:2 * stride] - pos[:stride]) * scale
    vel[n - stride:] = (pos[n - stride:] - pos[n - 2 * stride:n - stride]) * scale
    return vel


def feature_streams(
    record: SequenceRecord,
    cutoff_hz: Optional[float] = None,
    stride: int = 1,
    mag_feature: str = "derivative",
) -> Tuple[NDArray[np.float64], Optional[NDArray[np.float64]]]:
    """Per-sample ``[a^g, w^g, dm^b]`` features and, when available, planar velocity.

    ``mag_feature="raw"`` puts the body-frame field ``m^b`` in the last three
    channels instead of its derivative.
    """

    channel_names(mag_feature)
    acc_g, gyro_g = to_heading_agnostic(record)
    if mag_feature == "raw":
        mag = smoothed_mag(record, cutoff_hz=cutoff_hz)
    else:
        mag = mag_body_derivative(record, cutoff_hz=cutoff_hz)
    features = np.hstack([acc_g, gyro_g, mag])
    vel = gt_velocity(record, stride=stride) if record.has_ground_truth else None
    return features, vel


# ----------------------------------------------------------------------
# Windowing
# ----------------------------------------------------------------------
def _window(record: SequenceRecord, features, vel, offset: int, length: int, index: int) -> FeatureWindow:
    return FeatureWindow(
        features=features[offset:offset + length],
        gt_vel=None if vel is None else vel[offset:offset + length],
        t0=float(record.t[offset]),
        sequence_id=record.id,
        index=index,
        offset=offset,
        fs=float(record.fs),
    )


def make_windows(
    record: SequenceRecord,
    length: int,
    step: int,
    cutoff_hz: Optional[float] = None,
    stride: int = 1,
    mag_feature: str = "derivative",
) -> List[FeatureWindow]:
    """Sliding windows of ``length`` samples at offsets ``0, step, 2*step, ...``."""

    length = validate_positive_int(length, "L")
    step = validate_positive_int(step, "step")
    if len(record) < length:
        return []
    features, vel = feature_streams(record, cutoff_hz=cutoff_hz, stride=stride, mag_feature=mag_feature)
    offsets = range(0, len(record) - length + 1, step)
    return [_window(record, features, vel, offset, length, index) for index, offset in enumerate(offsets)]


def make_segments(
    record: SequenceRecord,
    length: int = 200,
    windows: int = 15,
    seg_step: int = 400,
    cutoff_hz: Optional[float] = None,
    stride: int = 1,
    mag_feature: str = "derivative",
) -> List[SegmentSample]:
    """Segments of ``windows`` adjacent windows, starting every ``seg_step`` samples."""

    length = validate_positive_int(length, "L")
    windows = validate_positive_int(windows, "S")
    seg_step = validate_positive_int(seg_step, "seg_step")
    span = length * windows
    if len(record) < span:
        raise SequenceTooShortError(f"segment of {windows}x{length}", span, len(record))
    features, vel = feature_streams(record, cutoff_hz=cutoff_hz, stride=stride, mag_feature=mag_feature)
    segments = []
    for start in range(0, len(record) - span + 1, seg_step):
        parts = tuple(
            _window(record, features, vel, start + k * length, length, k) for k in range(windows)
        )
        segments.append(SegmentSample(parts))
    return segments


def augment_rotation(segment: SegmentSample, phi: float) -> SegmentSample:
    """Rotate the floor-plane components of ``a^g``, ``w^g`` and the velocity by ``phi``.

    The magnetometer channels are body-frame and stay unchanged.
    """

    rotated = []
    for window in segment.windows:
        features = window.features.copy()
        for x, y in PLANAR_PAIRS:
            features[:, [x, y]] = geom.rotate_planar(window.features[:, [x, y]], phi)
        gt_vel = None if window.gt_vel is None else geom.rotate_planar(window.gt_vel, phi)
        rotated.append(replace(window, features=features, gt_vel=gt_vel))
    return SegmentSample(tuple(rotated))


def stack_segments(segments: Sequence[SegmentSample]) -> Tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Batch segments into ``(B, S, L, 9)`` features and ``(B, S, L, 2)`` velocities."""

    if not segments:
        raise ValueError("cannot stack an empty batch")
    shape = (len(segments[0]), segments[0].windows[0].length)
    for segment in segments:
        if (len(segment), segment.windows[0].length) != shape:
            raise ValueError("all segments of a batch must share S and L")
    return (
        np.stack([segment.features for segment in segments]),
        np.stack([segment.gt_vel for segment in segments]),
    )


# ----------------------------------------------------------------------
# Normalization
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class NormalizationStats:
    """Per-channel standardization fitted on the training split.

    Planar channel pairs use zero mean and a pooled scale so standardization
    commutes with yaw rotation of the floor plane.
    """

    mean: NDArray[np.float64]
    std: NDArray[np.float64]
    vel_scale: float = 1.0

    def __post_init__(self) -> None:
        mean = ensure_finite(self.mean, "mean")
        std = ensure_finite(self.std, "std")
        if mean.shape != (N_CHANNELS,) or std.shape != (N_CHANNELS,):
            raise ValueError(f"normalization statistics must have {N_CHANNELS} channels")
        if np.any(std <= 0):
            raise ValueError("std must be positive")
        validate_positive(self.vel_scale, "vel_scale")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @classmethod
    def identity(cls) -> "NormalizationStats":
        return cls(mean=np.zeros(N_CHANNELS), std=np.ones(N_CHANNELS), vel_scale=1.0)

    @classmethod
    def fit(cls, windows: Sequence[FeatureWindow], floor: float = 1e-6) -> "NormalizationStats":
        if not windows:
            raise ValueError("cannot fit normalization statistics without windows")
        features = np.concatenate([window.features for window in windows])
        mean = features.mean(axis=0)
        std = features.std(axis=0)
        for x, y in PLANAR_PAIRS:
            mean[[x, y]] = 0.0
            std[[x, y]] = np.sqrt(0.5 * np.mean(features[:, x] ** 2 + features[:, y] ** 2))
        std = np.maximum(std, floor)
        velocities = [window.gt_vel for window in windows if window.gt_vel is not None]
        vel_scale = 1.0
        if velocities:
            vel = np.concatenate(velocities)
            vel_scale = max(float(np.sqrt(0.5 * np.mean(np.sum(vel**2, axis=1)))), floor)
        return cls(mean=mean, std=std, vel_scale=vel_scale)

    def apply(self, features: NDArray[np.float64]) -> NDArray[np.float64]:
        return (np.asarray(features, dtype=np.float64) - self.mean) / self.std

    def to_dict(self) -> Dict[str, Any]:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "vel_scale": self.vel_scale}

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "NormalizationStats":
        return cls(
            mean=np.asarray(payload["mean"], dtype=np.float64),
            std=np.asarray(payload["std"], dtype=np.float64),
            vel_scale=float(payload["vel_scale"]),
        )


# ----------------------------------------------------------------------
# Options
# ----------------------------------------------------------------------
@dataclass
class DataConfig:
    """Windowing and feature options shared by training, evaluation and tracking."""

    window_length: int = 200
    segment_windows: int = 15
    segment_step: int = 400
    eval_step: int = 200
    velocity_stride: int = 1
    mag_cutoff_hz: Optional[float] = None
    orientation_eps: float = 0.05
    nominal_fs: Optional[float] = NOMINAL_FS
    mag_feature: str = "derivative"

    def __post_init__(self) -> None:
        validate_positive_int(self.window_length, "window_length")
        validate_positive_int(self.segment_windows, "segment_windows")
        validate_positive_int(self.segment_step, "segment_step")
        validate_positive_int(self.eval_step, "eval_step")
        validate_positive_int(self.velocity_stride, "velocity_stride")
        if self.mag_cutoff_hz is not None:
            validate_positive(self.mag_cutoff_hz, "mag_cutoff_hz")
        validate_positive(self.orientation_eps, "orientation_eps")
        if self.nominal_fs is not None:
            validate_positive(self.nominal_fs, "nominal_fs")
        channel_names(self.mag_feature)

    @property
    def channels(self) -> Tuple[str, ...]:
        return channel_names(self.mag_feature)

    def load(self, path: str | Path) -> SequenceRecord:
        return load_sequence(path, nominal_fs=self.nominal_fs)

    def segments(self, record: SequenceRecord) -> List[SegmentSample]:
        return make_segments(
            record,
            length=self.window_length,
            windows=self.segment_windows,
            seg_step=self.segment_step,
            cutoff_hz=self.mag_cutoff_hz,
            stride=self.velocity_stride,
            mag_feature=self.mag_feature,
        )

    def windows(self, record: SequenceRecord, step: Optional[int] = None) -> List[FeatureWindow]:
        return make_windows(
            record,
            length=self.window_length,
            step=self.eval_step if step is None else step,
            cutoff_hz=self.mag_cutoff_hz,
            stride=self.velocity_stride,
            mag_feature=self.mag_feature,
        )
