"""Quaternion conventions checked against scipy's rotation implementation."""

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from inertrack import geom


def _scipy(q: np.ndarray) -> Rotation:
    return Rotation.from_quat(np.roll(q, -1, axis=-1))


def test_rotation_of_x_axis_by_quarter_turn_about_z() -> None:
    q = geom.quat_from_axis_angle([0.0, 0.0, 1.0], np.pi / 2)

    np.testing.assert_allclose(geom.quat_rotate(q, [1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], atol=1e-12)


def test_rotate_matches_scipy_for_random_quaternions(rng) -> None:
    q = geom.quat_normalize(rng.normal(size=(50, 4)))
    v = rng.normal(size=(50, 3))

    np.testing.assert_allclose(geom.quat_rotate(q, v), _scipy(q).apply(v), atol=1e-12)
    np.testing.assert_allclose(geom.quat_to_matrix(q), _scipy(q).as_matrix(), atol=1e-12)


def test_hamilton_product_composes_like_matrices(rng) -> None:
    a = geom.quat_normalize(rng.normal(size=(20, 4)))
    b = geom.quat_normalize(rng.normal(size=(20, 4)))

    composed = geom.quat_to_matrix(geom.quat_multiply(a, b))
    expected = geom.quat_to_matrix(a) @ geom.quat_to_matrix(b)

    np.testing.assert_allclose(composed, expected, atol=1e-12)


def test_conjugate_inverts_rotation(rng) -> None:
    q = geom.quat_normalize(rng.normal(size=(10, 4)))
    v = rng.normal(size=(10, 3))

    np.testing.assert_allclose(geom.quat_rotate(geom.quat_conjugate(q), geom.quat_rotate(q, v)), v, atol=1e-12)


def test_euler_construction_matches_intrinsic_zyx(rng) -> None:
    roll, pitch, yaw = rng.uniform(-0.5, 0.5, size=(3, 30))
    q = geom.quat_from_euler(roll, pitch, yaw)
    expected = Rotation.from_euler("ZYX", np.stack([yaw, pitch, roll], axis=1)).as_matrix()

    np.testing.assert_allclose(geom.quat_to_matrix(q), expected, atol=1e-12)
    np.testing.assert_allclose(geom.quat_yaw(q), yaw, atol=1e-12)


def test_rotvec_exponential_matches_scipy_and_handles_zero(rng) -> None:
    rotvec = rng.normal(scale=0.3, size=(10, 3))

    np.testing.assert_allclose(
        geom.quat_to_matrix(geom.quat_from_rotvec(rotvec)),
        Rotation.from_rotvec(rotvec).as_matrix(),
        atol=1e-12,
    )
    np.testing.assert_array_equal(geom.quat_from_rotvec(np.zeros(3)), geom.IDENTITY)


def test_yaw_rotation_turns_about_gravity_axis() -> None:
    q = geom.yaw_rotation(np.pi / 2)

    np.testing.assert_allclose(geom.quat_rotate(q, [1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(geom.quat_rotate(q, [0.0, 0.0, 9.81]), [0.0, 0.0, 9.81], atol=1e-12)


def test_skew_is_cross_product(rng) -> None:
    w, v = rng.normal(size=(2, 3))

    np.testing.assert_allclose(geom.skew(w) @ v, np.cross(w, v), atol=1e-12)


def test_normalize_picks_non_negative_scalar() -> None:
    q = geom.quat_normalize([-2.0, 0.0, 0.0, 0.0])

    np.testing.assert_array_equal(q, [1.0, 0.0, 0.0, 0.0])


def test_rotate_planar_quarter_turn() -> None:
    np.testing.assert_allclose(geom.rotate_planar([[1.0, 0.0]], np.pi / 2), [[0.0, 1.0]], atol=1e-12)


@pytest.mark.parametrize(
    "call, message",
    [
        (lambda: geom.quat_normalize([0.0, 0.0, 0.0, 0.0]), "zero quaternion"),
        (lambda: geom.quat_rotate([1.0, 0.0, 0.0], [1.0, 0.0, 0.0]), "trailing dimension of 4"),
        (lambda: geom.quat_rotate([1.0, 0.0, 0.0, 0.0], [1.0, 0.0]), "trailing dimension of 3"),
        (lambda: geom.quat_from_axis_angle([0.0, 0.0, 0.0], 1.0), "axis must be non-zero"),
        (lambda: geom.quat_conjugate([np.nan, 0.0, 0.0, 0.0]), "non-finite"),
    ],
)
def test_invalid_inputs_are_rejected(call, message) -> None:
    with pytest.raises(ValueError) as exc:
        call()

    assert message in str(exc.value)
