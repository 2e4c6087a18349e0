"""Classical trackers: naive double integration and an error-state EKF.

Both share the same strapdown pieces: orientation propagated by the mean body
rate over each sample interval, specific force rotated to the world frame,
gravity removed, then trapezoidal double integration.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.signal import lfilter

from . import geom
from .errors import FilterDivergenceError
from .ingest import SequenceRecord, SynthParams
from .metrics import Trajectory
from .utils import GRAVITY_WORLD, cumulative_integral, rms, wrap_angle
from .validators import validate_positive

logger = logging.getLogger(__name__)

Array = NDArray[np.float64]


# ----------------------------------------------------------------------
# Strapdown helpers
# ----------------------------------------------------------------------
def _increment(w0: Array, w1: Array, dt: float) -> Array:
    return geom.quat_from_rotvec(0.5 * (w0 + w1) * dt)


def propagate_orientation(record: SequenceRecord, gyro_bias: ArrayLike = (0.0, 0.0, 0.0)) -> Array:
    """Integrate the gyroscope from the first orientation sample."""

    if len(record) == 0:
        raise ValueError(f"{record.id} is empty")
    gyro = np.asarray(record.gyro) - np.asarray(gyro_bias, dtype=np.float64)
    dt = record.dt
    increments = geom.quat_from_rotvec(0.5 * (gyro[:-1] + gyro[1:]) * dt)
    orient = np.empty((len(record), 4))
    orient[0] = geom.quat_normalize(record.orient[0])
    for k, increment in enumerate(increments):
        orient[k + 1] = geom.quat_multiply(orient[k], increment)
    return orient


def integrate_positions(
    orient: Array,
    acc: Array,
    dt: float,
    initial_velocity: ArrayLike = (0.0, 0.0, 0.0),
) -> Array:
    """Gravity-compensated trapezoidal double integration; returns ``(N, 3)`` positions from the origin."""

    acc_world = geom.quat_rotate(orient, acc) - GRAVITY_WORLD
    velocity = cumulative_integral(acc_world, dt, initial_velocity)
    return cumulative_integral(velocity, dt, np.zeros(3))


def ndi_track(record: SequenceRecord, initial_velocity: ArrayLike = (0.0, 0.0, 0.0)) -> Trajectory:
    """Naive double integration: gyro-only orientation, twice-integrated acceleration."""

    if len(record) == 0:
        raise ValueError(f"{record.id} is empty")
    orient = propagate_orientation(record)
    positions = integrate_positions(orient, np.asarray(record.acc), record.dt, initial_velocity)
    return Trajectory(record.t, positions[:, :2])


# ----------------------------------------------------------------------
# Error-state EKF
# ----------------------------------------------------------------------
@dataclass
class EkfConfig:
    """Noise model of the error-state filter (all standard deviations).

    ``gyro_noise`` is per sample (rad/s), ``gyro_bias_walk`` in rad/s/sqrt(s),
    ``acc_noise`` in m/s^2 and ``mag_heading_noise`` in radians of heading.
    """

    gyro_noise: float = 1e-3
    gyro_bias_walk: float = 1e-5
    acc_noise: float = 0.5
    mag_heading_noise: float = 0.05
    initial_attitude: float = 1e-3
    initial_bias: float = 5e-3
    use_magnetometer: bool = True

    def __post_init__(self) -> None:
        for name in ("gyro_noise", "gyro_bias_walk", "acc_noise", "mag_heading_noise",
                     "initial_attitude", "initial_bias"):
            validate_positive(getattr(self, name), name)

    @classmethod
    def from_synth(cls, params: SynthParams, use_magnetometer: bool = True) -> "EkfConfig":
        """Noise levels matched to a synthetic generator, floored to keep the filter well posed."""

        horizontal = float(np.hypot(params.world_mag[0], params.world_mag[1]))
        mag_heading = params.mag_noise / horizontal if horizontal > 0 else 0.0
        return cls(
            gyro_noise=max(params.gyro_noise, 1e-4),
            gyro_bias_walk=1e-5,
            acc_noise=max(params.acc_noise, 0.05) + 0.5,  # linear acceleration acts as noise
            mag_heading_noise=max(mag_heading, 1e-3),
            initial_bias=max(float(np.max(np.abs(params.gyro_bias))), 5e-3),
            use_magnetometer=use_magnetometer,
        )


@dataclass(frozen=True)
class EkfResult:
    orient: Array
    gyro_bias: Array
    trajectory: Trajectory


def _check_covariance(p: Array, step: int) -> Array:
    p = 0.5 * (p + p.T)
    if not np.all(np.isfinite(p)) or np.linalg.eigvalsh(p)[0] <= 0.0:
        raise FilterDivergenceError(f"EKF covariance is not positive definite at sample {step}")
    return p


class _ErrorStateFilter:
    """Attitude error (body frame) plus gyro bias; 6 error states."""

    def __init__(self, q0: Array, cfg: EkfConfig, dt: float) -> None:
        self.q = geom.quat_normalize(q0)
        self.bias = np.zeros(3)
        self.cfg = cfg
        self.dt = dt
        self.p = np.diag([cfg.initial_attitude**2] * 3 + [cfg.initial_bias**2] * 3)
        self.q_noise = np.diag([(cfg.gyro_noise * dt) ** 2] * 3 + [cfg.gyro_bias_walk**2 * dt] * 3)
        self.mag_reference: Optional[float] = None

    def predict(self, w0: Array, w1: Array) -> None:
        w = 0.5 * (w0 + w1) - self.bias
        self.q = geom.quat_multiply(self.q, geom.quat_from_rotvec(w * self.dt))
        f = np.eye(6)
        f[:3, :3] -= geom.skew(w) * self.dt
        f[:3, 3:] = -np.eye(3) * self.dt
        self.p = f @ self.p @ f.T + self.q_noise

    def _correct(self, innovation: Array, h: Array, r: Array, step: int) -> None:
        s = h @ self.p @ h.T + r
        k = np.linalg.solve(s, h @ self.p).T
        dx = k @ innovation
        i_kh = np.eye(6) - k @ h
        self.p = _check_covariance(i_kh @ self.p @ i_kh.T + k @ r @ k.T, step)
        self.q = geom.quat_multiply(self.q, geom.quat_from_rotvec(dx[:3]))
        self.bias = self.bias + dx[3:]

    def update_gravity(self, acc: Array, step: int) -> None:
        rot = geom.quat_to_matrix(self.q)
        expected = rot.T @ GRAVITY_WORLD
        h = np.zeros((3, 6))
        h[:, :3] = geom.skew(expected)
        self._correct(acc - expected, h, np.eye(3) * self.cfg.acc_noise**2, step)

    def mag_heading(self, mag: Array) -> float:
        world = geom.quat_to_matrix(self.q) @ mag
        return float(np.arctan2(world[1], world[0]))

    def update_heading(self, mag: Array, step: int) -> None:
        if self.mag_reference is None:
            self.mag_reference = self.mag_heading(mag)
            return
        innovation = wrap_angle(self.mag_reference - self.mag_heading(mag))
        h = np.zeros((1, 6))
        h[0, :3] = geom.quat_to_matrix(self.q)[2]
        self._correct(np.atleast_1d(innovation), h, np.array([[self.cfg.mag_heading_noise**2]]), step)


def ekf_orientation(record: SequenceRecord, cfg: Optional[EkfConfig] = None) -> Tuple[Array, Array]:
    """Filtered orientation and gyro-bias estimate for every sample.

    The magnetic heading reference is calibrated on the first sample against the
    initial orientation.
    """

    cfg = cfg or EkfConfig()
    if len(record) == 0:
        raise ValueError(f"{record.id} is empty")
    gyro, acc, mag = np.asarray(record.gyro), np.asarray(record.acc), np.asarray(record.mag)
    flt = _ErrorStateFilter(record.orient[0], cfg, record.dt)
    orient = np.empty((len(record), 4))
    bias = np.empty((len(record), 3))
    if cfg.use_magnetometer:
        flt.update_heading(mag[0], 0)
    orient[0], bias[0] = flt.q, flt.bias
    for k in range(1, len(record)):
        flt.predict(gyro[k - 1], gyro[k])
        flt.update_gravity(acc[k], k)
        if cfg.use_magnetometer:
            flt.update_heading(mag[k], k)
        orient[k], bias[k] = flt.q, flt.bias
    logger.debug("EKF on %s: final gyro bias %s", record.id, np.round(bias[-1], 6))
    return orient, bias


def ekf_track(
    record: SequenceRecord,
    cfg: Optional[EkfConfig] = None,
    initial_velocity: ArrayLike = (0.0, 0.0, 0.0),
) -> EkfResult:
    """Error-state EKF attitude, then gravity-compensated double integration."""

    orient, bias = ekf_orientation(record, cfg)
    positions = integrate_positions(orient, np.asarray(record.acc), record.dt, initial_velocity)
    return EkfResult(orient=orient, gyro_bias=bias, trajectory=Trajectory(record.t, positions[:, :2]))


# ----------------------------------------------------------------------
# Heading utilities
# ----------------------------------------------------------------------
def gyro_heading(record: SequenceRecord) -> Array:
    """Yaw from integrating the body ``z`` rate, starting at the initial yaw."""

    yaw0 = float(geom.quat_yaw(record.orient[0]))
    return wrap_angle(cumulative_integral(np.asarray(record.gyro)[:, 2], record.dt, yaw0))


def tilt_compensated_heading(acc: ArrayLike, mag: ArrayLike) -> Array:
    """Raw heading angle of the horizontal magnetometer projection, tilt taken from the accelerometer."""

    acc = np.asarray(acc, dtype=np.float64)
    mag = np.asarray(mag, dtype=np.float64)
    roll = np.arctan2(acc[..., 1], acc[..., 2])
    pitch = np.arctan2(-acc[..., 0], np.hypot(acc[..., 1], acc[..., 2]))
    mx, my, mz = mag[..., 0], mag[..., 1], mag[..., 2]
    sr, cr, sp, cp = np.sin(roll), np.cos(roll), np.sin(pitch), np.cos(pitch)
    horizontal_x = mx * cp + (my * sr + mz * cr) * sp
    horizontal_y = my * cr - mz * sr
    return np.arctan2(horizontal_y, horizontal_x)


def mag_heading(record: SequenceRecord) -> Array:
    """Yaw from the tilt-compensated magnetometer, referenced to the initial yaw."""

    raw = tilt_compensated_heading(record.acc, record.mag)
    yaw0 = float(geom.quat_yaw(record.orient[0]))
    return wrap_angle(yaw0 + raw[0] - raw)


# ----------------------------------------------------------------------
# Complementary heading correction
# ----------------------------------------------------------------------
@dataclass
class ComplementaryConfig:
    """First-order complementary filter between orientation-stream yaw and magnetometer heading.

    ``time_constant`` (seconds) sets the crossover: shorter trusts the
    magnetometer more.
    """

    time_constant: float = 5.0

    def __post_init__(self) -> None:
        validate_positive(self.time_constant, "time_constant")

    def gain(self, dt: float) -> float:
        return dt / (self.time_constant + dt)


def complementary_yaw_offset(record: SequenceRecord, cfg: Optional[ComplementaryConfig] = None) -> Array:
    """Per-sample yaw correction pulling the orientation stream toward the magnetometer heading.

    The offset ``e`` follows ``e[k] = (1 - g) e[k-1] + g d[k]`` where ``d`` is the
    unwrapped magnetometer-minus-stream yaw and ``e[-1] = 0``.
    """

    cfg = cfg or ComplementaryConfig()
    if len(record) == 0:
        raise ValueError(f"{record.id} is empty")
    stream = geom.quat_yaw(record.orient)
    disagreement = np.unwrap(wrap_angle(mag_heading(record) - stream))
    g = cfg.gain(record.dt)
    return lfilter([g], [1.0, g - 1.0], disagreement)


def complementary_corrected_velocity(
    velocity: ArrayLike,
    record: SequenceRecord,
    cfg: Optional[ComplementaryConfig] = None,
) -> Array:
    """Rotate predicted planar velocities by the complementary yaw offset of their samples."""

    velocity = np.asarray(velocity, dtype=np.float64)
    if velocity.ndim != 2 or velocity.shape[1] != 2 or len(velocity) > len(record):
        raise ValueError(f"velocity must have shape (n <= {len(record)}, 2), got {velocity.shape}")
    offset = complementary_yaw_offset(record, cfg)[: len(velocity)]
    return geom.rotate_planar(velocity, offset)


@dataclass(frozen=True)
class HeadingDriftReport:
    t: Array
    gyro_error: Array
    mag_error: Array
    ekf_error: Array

    @property
    def rmse(self) -> Dict[str, float]:
        return {
            "gyro": rms(self.gyro_error),
            "mag": rms(self.mag_error),
            "ekf": rms(self.ekf_error),
        }


def heading_drift_report(record: SequenceRecord, cfg: Optional[EkfConfig] = None) -> HeadingDriftReport:
    """Yaw errors of gyro-only, magnetometer-only and EKF headings against the orientation stream."""

    reference = geom.quat_yaw(record.orient)
    ekf_orient, _ = ekf_orientation(record, cfg)
    return HeadingDriftReport(
        t=np.asarray(record.t),
        gyro_error=wrap_angle(gyro_heading(record) - reference),
        mag_error=wrap_angle(mag_heading(record) - reference),
        ekf_error=wrap_angle(geom.quat_yaw(ekf_orient) - reference),
    )
