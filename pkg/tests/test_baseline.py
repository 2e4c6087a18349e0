"""Naive double integration, the error-state EKF and heading-drift utilities."""

import numpy as np
import pytest

from inertrack import geom
from inertrack.baseline import (
    ComplementaryConfig,
    EkfConfig,
    complementary_corrected_velocity,
    complementary_yaw_offset,
    ekf_orientation,
    ekf_track,
    gyro_heading,
    heading_drift_report,
    mag_heading,
    ndi_track,
    propagate_orientation,
)
from inertrack.ingest import SequenceRecord, SynthParams, synth_sequence
from inertrack.metrics import Trajectory, ate


def _gt_track(record: SequenceRecord) -> Trajectory:
    return Trajectory(record.t, record.gt_pos[:, :2])


def _with_mag(record: SequenceRecord, mag: np.ndarray) -> SequenceRecord:
    return SequenceRecord(
        id=record.id, t=record.t, acc=record.acc, gyro=record.gyro, mag=mag,
        orient=record.orient, gt_pos=record.gt_pos, fs=record.fs,
    )


@pytest.fixture
def drifting_record() -> SequenceRecord:
    """Five minutes of standing and turning with a biased, noisy gyroscope."""

    return synth_sequence(
        SynthParams(
            duration=300.0,
            fs=50.0,
            n_waypoints=1,
            yaw_oscillation=0.3,
            tilt_amplitude=0.05,
            acc_noise=0.05,
            gyro_noise=0.002,
            mag_noise=0.3,
            gyro_bias=(0.0, 0.0, 0.002),
            seed=21,
        ),
        sequence_id="drift",
    )


# ----------------------------------------------------------------------
# Naive double integration
# ----------------------------------------------------------------------
def test_stationary_record_stays_in_place(stationary_record) -> None:
    track = ndi_track(stationary_record)

    assert np.max(np.linalg.norm(track.positions, axis=1)) < 1e-6


def test_gyro_propagation_reproduces_a_pure_yaw_motion(stationary_record) -> None:
    orient = propagate_orientation(stationary_record)

    yaw_error = geom.quat_yaw(orient) - geom.quat_yaw(stationary_record.orient)

    assert np.max(np.abs(np.angle(np.exp(1j * yaw_error)))) < 1e-4


def test_noise_free_walk_is_recovered() -> None:
    record = synth_sequence(SynthParams(duration=60.0, fs=200.0, seed=8))

    assert ate(ndi_track(record), _gt_track(record)) < 0.05


def test_integration_error_is_second_order() -> None:
    errors = []
    for fs in (100.0, 200.0):
        record = synth_sequence(SynthParams(duration=60.0, fs=fs, seed=8))
        errors.append(ate(ndi_track(record), _gt_track(record)))

    assert errors[0] >= 3.0 * errors[1]


def test_accelerometer_bias_drifts_quadratically() -> None:
    record = synth_sequence(
        SynthParams(duration=10.0, fs=100.0, n_waypoints=1, yaw_oscillation=0.0, acc_bias=(0.01, 0.0, 0.0), seed=2)
    )

    track = ndi_track(record)

    assert np.linalg.norm(track.positions[-1]) == pytest.approx(0.5 * 0.01 * 10.0**2, rel=1e-6)


def test_initial_velocity_is_carried(stationary_record) -> None:
    track = ndi_track(stationary_record, initial_velocity=(0.5, 0.0, 0.0))

    assert track.positions[-1] == pytest.approx([0.5 * stationary_record.t[-1], 0.0], abs=1e-6)


# ----------------------------------------------------------------------
# Error-state EKF
# ----------------------------------------------------------------------
def test_ekf_without_measurement_trust_matches_ndi(walk_record) -> None:
    cfg = EkfConfig(acc_noise=1e8, mag_heading_noise=1e8)

    result = ekf_track(walk_record, cfg)

    np.testing.assert_allclose(result.trajectory.positions, ndi_track(walk_record).positions, atol=1e-6)


def test_ekf_without_magnetometer_ignores_it(walk_record, rng) -> None:
    cfg = EkfConfig(use_magnetometer=False)
    scrambled = _with_mag(walk_record, rng.normal(size=walk_record.mag.shape))

    first, bias_first = ekf_orientation(walk_record, cfg)
    second, bias_second = ekf_orientation(scrambled, cfg)

    np.testing.assert_array_equal(first, second)
    np.testing.assert_array_equal(bias_first, bias_second)


def test_ekf_outputs_unit_quaternions(noisy_record) -> None:
    result = ekf_track(noisy_record, EkfConfig.from_synth(SynthParams(gyro_noise=0.002, mag_noise=0.3)))

    np.testing.assert_allclose(np.linalg.norm(result.orient, axis=1), 1.0, atol=1e-9)
    assert result.gyro_bias.shape == (len(noisy_record), 3)
    assert len(result.trajectory) == len(noisy_record)


def test_ekf_heading_beats_the_open_loop_gyro(drifting_record) -> None:
    cfg = EkfConfig.from_synth(
        SynthParams(acc_noise=0.05, gyro_noise=0.002, mag_noise=0.3, gyro_bias=(0.0, 0.0, 0.002))
    )

    report = heading_drift_report(drifting_record, cfg)

    assert report.rmse["ekf"] < report.rmse["gyro"]
    assert report.rmse["mag"] < report.rmse["gyro"]
    assert abs(report.gyro_error[-1]) > abs(report.gyro_error[len(report.t) // 10])


# ----------------------------------------------------------------------
# Heading utilities
# ----------------------------------------------------------------------
def test_gyro_heading_of_a_constant_rate_is_linear() -> None:
    n = 201
    t = np.arange(n) / 10.0
    record = SequenceRecord(
        id="spin", t=t, acc=np.tile([0.0, 0.0, 9.81], (n, 1)), gyro=np.tile([0.0, 0.0, 0.1], (n, 1)),
        mag=np.tile([20.0, 0.0, -40.0], (n, 1)), orient=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
    )

    np.testing.assert_allclose(gyro_heading(record), 0.1 * t, atol=1e-12)


def test_magnetometer_heading_follows_the_true_yaw(stationary_record) -> None:
    error = mag_heading(stationary_record) - geom.quat_yaw(stationary_record.orient)

    assert np.max(np.abs(np.angle(np.exp(1j * error)))) < 1e-9


@pytest.mark.parametrize("tilt", [0.1, 0.2, 0.3])
def test_magnetometer_heading_is_tilt_compensated(tilt) -> None:
    record = synth_sequence(
        SynthParams(duration=10.0, fs=100.0, n_waypoints=1, yaw_oscillation=0.3, tilt_amplitude=tilt, seed=5)
    )

    error = mag_heading(record) - geom.quat_yaw(record.orient)

    assert np.max(np.abs(np.angle(np.exp(1j * error)))) < 1e-6


# ----------------------------------------------------------------------
# Complementary heading correction
# ----------------------------------------------------------------------
def _drifting_stream(record: SequenceRecord, rate: float) -> SequenceRecord:
    """Orientation stream whose yaw runs away from the truth at ``rate`` rad/s."""

    drift = geom.yaw_rotation(rate * (record.t - record.t[0]))
    return SequenceRecord(
        id=record.id, t=record.t, acc=record.acc, gyro=record.gyro, mag=record.mag,
        orient=geom.quat_multiply(drift, record.orient), gt_pos=record.gt_pos, fs=record.fs,
    )


def test_consistent_stream_needs_no_heading_correction(stationary_record) -> None:
    velocity = np.tile([1.0, 0.5], (len(stationary_record), 1))

    corrected = complementary_corrected_velocity(velocity, stationary_record)

    np.testing.assert_allclose(corrected, velocity, atol=1e-8)


def test_complementary_offset_tracks_a_yaw_drift(stationary_record) -> None:
    rate = 0.01
    cfg = ComplementaryConfig(time_constant=1.0)
    record = _drifting_stream(stationary_record, rate)
    elapsed = record.t[-1] - record.t[0]

    offset = complementary_yaw_offset(record, cfg)
    corrected = complementary_corrected_velocity(np.tile([1.0, 0.0], (len(record), 1)), record, cfg)

    assert offset[0] == pytest.approx(0.0, abs=1e-9)
    assert offset[-1] == pytest.approx(-rate * (elapsed - cfg.time_constant), rel=1e-3)
    assert np.arctan2(corrected[-1, 1], corrected[-1, 0]) == pytest.approx(offset[-1], abs=1e-12)
    assert abs(offset[-1] + rate * elapsed) < abs(rate * elapsed)


def test_corrected_velocity_cannot_outrun_the_record(stationary_record) -> None:
    with pytest.raises(ValueError):
        complementary_corrected_velocity(np.zeros((len(stationary_record) + 1, 2)), stationary_record)
    with pytest.raises(ValueError):
        ComplementaryConfig(time_constant=0.0)


@pytest.mark.parametrize(
    "kwargs, error_message",
    [
        ({"gyro_noise": 0.0}, "gyro_noise"),
        ({"acc_noise": -1.0}, "acc_noise"),
        ({"mag_heading_noise": 0.0}, "mag_heading_noise"),
        ({"initial_bias": 0.0}, "initial_bias"),
    ],
)
def test_ekf_config_validates_inputs(kwargs, error_message) -> None:
    with pytest.raises(ValueError) as exc:
        EkfConfig(**kwargs)

    assert error_message in str(exc.value)
