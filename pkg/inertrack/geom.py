"""Quaternion and rotation primitives.

Conventions shared by every module:

* Hamilton product, scalar-first storage ``(w, x, y, z)``.
* Active rotation of vectors, ``v' = q v q*``.
* Orientation quaternions map body-frame vectors into the world frame; the
  world-to-body rotation is therefore the conjugate.

All functions accept arrays with arbitrary leading (batch) dimensions, so a
whole sequence of orientations can be processed at once.
"""

from __future__ import annotations

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .validators import ensure_finite

Quaternion = NDArray[np.float64]
Vec3 = NDArray[np.float64]
Mat3 = NDArray[np.float64]

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


def _as_quat(q: ArrayLike, name: str = "q") -> Quaternion:
    array = ensure_finite(q, name)
    if array.shape[-1:] != (4,):
        raise ValueError(f"{name} must have a trailing dimension of 4, got {array.shape}")
    return array


def _as_vec(v: ArrayLike, name: str = "v") -> Vec3:
    array = ensure_finite(v, name)
    if array.shape[-1:] != (3,):
        raise ValueError(f"{name} must have a trailing dimension of 3, got {array.shape}")
    return array


def quat_normalize(q: ArrayLike) -> Quaternion:
    """Return the unit quaternion with canonical sign ``w >= 0``."""

    q = _as_quat(q)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise ValueError("cannot normalize a zero quaternion")
    q = q / norm
    return np.where(q[..., :1] < 0.0, -q, q)


def quat_conjugate(q: ArrayLike) -> Quaternion:
    q = _as_quat(q)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_multiply(a: ArrayLike, b: ArrayLike) -> Quaternion:
    """Hamilton product ``a ⊗ b``, renormalized."""

    a = _as_quat(a, "a")
    b = _as_quat(b, "b")
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    product = np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )
    return product / np.linalg.norm(product, axis=-1, keepdims=True)


def quat_rotate(q: ArrayLike, v: ArrayLike) -> Vec3:
    """Rotate ``v`` by the unit quaternion ``q`` (computes ``q v q*``)."""

    q = _as_quat(q)
    v = _as_vec(v)
    w = q[..., :1]
    u = q[..., 1:]
    uv = np.cross(u, v)
    return v + 2.0 * w * uv + 2.0 * np.cross(u, uv)


def quat_from_axis_angle(axis: ArrayLike, angle: ArrayLike) -> Quaternion:
    axis = _as_vec(axis, "axis")
    norm = np.linalg.norm(axis, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise ValueError("axis must be non-zero")
    half = 0.5 * np.asarray(angle, dtype=np.float64)[..., None]
    return np.concatenate([np.cos(half), np.sin(half) * axis / norm], axis=-1)


def quat_from_rotvec(rotvec: ArrayLike) -> Quaternion:
    """Exponential map of a rotation vector; well defined at zero."""

    rotvec = _as_vec(rotvec, "rotvec")
    angle = np.linalg.norm(rotvec, axis=-1, keepdims=True)
    half = 0.5 * angle
    # sin(x/2)/x with its series expansion near zero
    small = angle < 1e-8
    safe = np.where(small, 1.0, angle)
    scale = np.where(small, 0.5 - angle**2 / 48.0, np.sin(half) / safe)
    return np.concatenate([np.cos(half), scale * rotvec], axis=-1)


def yaw_rotation(phi: ArrayLike) -> Quaternion:
    """Rotation about the world ``+z`` (gravity) axis by ``phi`` radians."""

    half = 0.5 * np.asarray(phi, dtype=np.float64)
    zeros = np.zeros_like(half)
    return np.stack([np.cos(half), zeros, zeros, np.sin(half)], axis=-1)


def quat_from_euler(roll: ArrayLike, pitch: ArrayLike, yaw: ArrayLike) -> Quaternion:
    """Body-to-world quaternion for intrinsic ZYX angles (yaw, then pitch, then roll)."""

    cr, sr = np.cos(0.5 * np.asarray(roll)), np.sin(0.5 * np.asarray(roll))
    cp, sp = np.cos(0.5 * np.asarray(pitch)), np.sin(0.5 * np.asarray(pitch))
    cy, sy = np.cos(0.5 * np.asarray(yaw)), np.sin(0.5 * np.asarray(yaw))
    return np.stack(
        [
            cy * cp * cr + sy * sp * sr,
            cy * cp * sr - sy * sp * cr,
            cy * sp * cr + sy * cp * sr,
            sy * cp * cr - cy * sp * sr,
        ],
        axis=-1,
    )


def quat_yaw(q: ArrayLike) -> NDArray[np.float64]:
    """Yaw (heading) of a body-to-world quaternion in radians."""

    q = _as_quat(q)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.arctan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z))


def quat_to_matrix(q: ArrayLike) -> Mat3:
    q = _as_quat(q)
    w, x, y, z = np.moveaxis(q, -1, 0)
    rows = [
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ]
    return np.stack([np.stack(row, axis=-1) for row in rows], axis=-2)


def skew(w: ArrayLike) -> Mat3:
    """Angular velocity matrix ``[w]x`` such that ``skew(w) @ v == cross(w, v)``."""

    w = _as_vec(w, "w")
    wx, wy, wz = np.moveaxis(w, -1, 0)
    zero = np.zeros_like(wx)
    return np.stack(
        [
            np.stack([zero, -wz, wy], axis=-1),
            np.stack([wz, zero, -wx], axis=-1),
            np.stack([-wy, wx, zero], axis=-1),
        ],
        axis=-2,
    )


def rotate_planar(xy: ArrayLike, phi: float) -> NDArray[np.float64]:
    """Rotate the trailing 2-vectors of ``xy`` by ``phi`` on the floor plane."""

    xy = np.asarray(xy, dtype=np.float64)
    c, s = np.cos(phi), np.sin(phi)
    return np.stack([c * xy[..., 0] - s * xy[..., 1], s * xy[..., 0] + c * xy[..., 1]], axis=-1)
