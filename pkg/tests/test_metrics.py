"""Trajectory integration and the ATE/RTE/PDE/AYE metrics."""

import math

import numpy as np
import pytest

from inertrack import geom
from inertrack.errors import SequenceTooShortError
from inertrack.metrics import Trajectory, aggregate, ate, aye, evaluate, integrate_velocity, pde, rte


def _line(duration: float, fs: float, speed: float = 1.0) -> Trajectory:
    t = np.arange(int(round(duration * fs)) + 1) / fs
    return Trajectory(t, np.stack([speed * t, np.zeros_like(t)], axis=1))


def _curve(rng, n: int = 3001, fs: float = 50.0) -> Trajectory:
    t = np.arange(n) / fs
    steps = rng.normal(scale=0.02, size=(n, 2)) + [0.02, 0.0]
    return Trajectory(t, np.cumsum(steps, axis=0))


def test_constant_velocity_integrates_to_a_straight_line() -> None:
    track = integrate_velocity(np.tile([1.0, 0.0], (2001, 1)), dt=0.005)

    assert track.positions[-1] == pytest.approx([10.0, 0.0], abs=1e-9)
    assert track.duration == pytest.approx(10.0)
    np.testing.assert_array_equal(track.positions[0], [0.0, 0.0])


def test_integration_starts_at_the_origin() -> None:
    track = integrate_velocity(np.zeros((5, 2)), dt=0.1, origin=(2.0, -1.0), t0=3.0)

    np.testing.assert_allclose(track.positions, np.tile([2.0, -1.0], (5, 1)))
    assert track.t[0] == 3.0


def test_ate_ignores_a_constant_translation() -> None:
    gt = _line(10.0, 50.0)

    shifted = Trajectory(gt.t, gt.positions + [5.0, -3.0])

    assert ate(shifted, gt) == pytest.approx(0.0, abs=1e-12)


def test_ate_of_a_lateral_offset_growing_linearly() -> None:
    gt = _line(10.0, 10.0)
    pred = Trajectory(gt.t, gt.positions + np.stack([np.zeros_like(gt.t), gt.t], axis=1))

    expected = math.sqrt(np.mean(gt.t**2))

    assert ate(pred, gt) == pytest.approx(expected, abs=1e-12)


def test_rte_of_linear_drift_is_the_drift_over_the_interval() -> None:
    gt = _line(120.0, 100.0)
    drift = 0.01

    pred = Trajectory(gt.t, gt.positions + np.stack([drift * gt.t, np.zeros_like(gt.t)], axis=1))

    assert rte(pred, gt, fs=100.0) == pytest.approx(drift * 60.0, abs=1e-9)


def test_rte_needs_a_full_interval() -> None:
    gt = _line(30.0, 100.0)

    with pytest.raises(SequenceTooShortError) as exc:
        rte(gt, gt, fs=100.0)

    assert exc.value.required == 6001


def test_pde_is_final_drift_over_path_length() -> None:
    gt = _line(100.0, 10.0)

    pred = Trajectory(gt.t, gt.positions + np.stack([np.zeros_like(gt.t), 0.02 * gt.t], axis=1))

    assert gt.path_length() == pytest.approx(100.0)
    assert pde(pred, gt) == pytest.approx(0.02, abs=1e-12)


def test_pde_of_a_stationary_ground_truth_is_undefined() -> None:
    still = Trajectory(np.arange(10) / 10.0, np.zeros((10, 2)))

    with pytest.raises(ValueError):
        pde(still, still)


def test_heading_error_of_a_right_angle() -> None:
    degrees, unit = aye([[0.0, 1.0]], [[1.0, 0.0]])

    assert degrees == pytest.approx(90.0)
    assert unit == pytest.approx(math.sqrt(2.0))


def test_heading_error_of_aligned_and_reversed_rows() -> None:
    degrees, unit = aye([[1.0, 0.0], [-1.0, 0.0]], [[1.0, 0.0], [1.0, 0.0]])

    assert degrees == pytest.approx(math.sqrt(180.0**2 / 2.0), abs=1e-9)
    assert degrees == pytest.approx(127.28, abs=5e-3)
    assert unit == pytest.approx(math.sqrt(2.0))


def test_heading_error_masks_slow_ground_truth() -> None:
    degrees, _ = aye([[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [0.01, 0.0]])

    assert degrees == 0.0
    with pytest.raises(ValueError):
        aye([[1.0, 0.0]], [[0.0, 0.0]])


def test_metrics_are_invariant_to_a_common_yaw(rng) -> None:
    gt = _curve(rng)
    pred = Trajectory(gt.t, gt.positions + rng.normal(scale=0.3, size=gt.positions.shape).cumsum(axis=0) * 0.01)
    phi = 0.9

    turned_gt = Trajectory(gt.t, geom.rotate_planar(gt.positions, phi))
    turned_pred = Trajectory(pred.t, geom.rotate_planar(pred.positions, phi))

    assert ate(turned_pred, turned_gt) == pytest.approx(ate(pred, gt), rel=1e-9)
    assert rte(turned_pred, turned_gt, fs=50.0) == pytest.approx(rte(pred, gt, fs=50.0), rel=1e-9)
    assert pde(turned_pred, turned_gt) == pytest.approx(pde(pred, gt), rel=1e-9)
    assert aye(turned_pred.velocity(), turned_gt.velocity())[0] == pytest.approx(
        aye(pred.velocity(), gt.velocity())[0], rel=1e-9
    )


def test_evaluate_reports_missing_rte_for_short_sequences() -> None:
    gt = _line(20.0, 50.0)
    pred = Trajectory(gt.t, gt.positions * 1.1)

    report = evaluate(pred, gt, sequence_id="short")

    assert report.rte is None
    assert report.ate > 0
    assert report.pde == pytest.approx(0.1, abs=1e-9)
    assert report.aye_deg == pytest.approx(0.0, abs=1e-9)
    assert report.to_dict()["sequence_id"] == "short"


def test_aggregate_skips_missing_values() -> None:
    long_gt = _line(70.0, 10.0)
    short_gt = _line(20.0, 10.0)
    reports = [
        evaluate(Trajectory(long_gt.t, long_gt.positions * 1.05), long_gt, "long"),
        evaluate(Trajectory(short_gt.t, short_gt.positions * 1.05), short_gt, "short"),
    ]

    summary = aggregate(reports)

    assert summary["sequences"] == 2
    assert summary["rte"] == pytest.approx(reports[0].rte)
    assert summary["ate"] == pytest.approx((reports[0].ate + reports[1].ate) / 2.0)


@pytest.mark.parametrize(
    "t, positions, error_message",
    [
        ([0.0, 1.0], np.zeros((3, 2)), "shape"),
        ([0.0, 0.0], np.zeros((2, 2)), "strictly increasing"),
        ([0.0, 1.0], [[0.0, 0.0], [np.nan, 0.0]], "non-finite"),
    ],
)
def test_trajectory_validates_inputs(t, positions, error_message) -> None:
    with pytest.raises(ValueError) as exc:
        Trajectory(np.asarray(t), np.asarray(positions))

    assert error_message in str(exc.value)
