"""Quaternion calculus and rotation-parametrized unit bearings.

Conventions:

* Quaternions are ``[w, x, y, z]`` arrays (Hamilton product, scalar
  first).  ``rotate(q, v)`` applies the rotation matrix ``rotmat(q)``
  to ``v`` and composition satisfies
  ``rotmat(quat_mul(a, b)) == rotmat(a) @ rotmat(b)``.
* A *bearing rotation* is an ordinary unit quaternion whose action on
  the optical axis encodes a line-of-sight direction:
  ``bearing(q) = rotmat(q) @ [0, 0, 1]``.  The rotated image axes span
  the tangent plane of the unit sphere at the bearing
  (``tangent_basis``), so a 2-D increment is well defined at every
  attitude.  Unlike minimal 2-angle charts there is no singular
  configuration anywhere on the sphere.
* All functions broadcast over leading axes and return float64 arrays.

Quaternion sign is canonicalized (w >= 0) after construction and
composition so that logs and tests are reproducible; the sign never
affects the underlying rotation.
"""

from __future__ import annotations

import numpy as np

EX = np.array([1.0, 0.0, 0.0])
EY = np.array([0.0, 1.0, 0.0])
EZ = np.array([0.0, 0.0, 1.0])

QUAT_IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])

_SMALL_ANGLE = 1e-8
_PARALLEL_TOL = 1e-9


def cross3(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cross product over the last axis.

    Equivalent to np.cross for (..., 3) inputs but without its axis
    bookkeeping, which dominates runtime on the small batches the
    solver works with.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return np.stack(
        [a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=-1
    )


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Unit-norm quaternion with canonical sign (w >= 0)."""
    q = np.asarray(q, dtype=float)
    out = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return np.where(out[..., :1] < 0.0, -out, out)


def quat_mul(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Hamilton product p (x) q, renormalized and sign-canonicalized."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    pw, px, py, pz = p[..., 0], p[..., 1], p[..., 2], p[..., 3]
    qw, qx, qy, qz = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.stack(
        [
            pw * qw - px * qx - py * qy - pz * qz,
            pw * qx + px * qw + py * qz - pz * qy,
            pw * qy - px * qz + py * qw + pz * qx,
            pw * qz + px * qy - py * qx + pz * qw,
        ],
        axis=-1,
    )
    return quat_normalize(out)


def quat_conj(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vector(s) v by quaternion(s) q, i.e. rotmat(q) @ v."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    u = q[..., 1:4]
    t = 2.0 * cross3(u, v)
    return v + q[..., :1] * t + cross3(u, t)


def rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix C(q), shape (..., 3, 3)."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    rows = [
        np.stack([1 - 2 * (yy + zz), 2 * (xy - wz), 2 * (xz + wy)], axis=-1),
        np.stack([2 * (xy + wz), 1 - 2 * (xx + zz), 2 * (yz - wx)], axis=-1),
        np.stack([2 * (xz - wy), 2 * (yz + wx), 1 - 2 * (xx + yy)], axis=-1),
    ]
    return np.stack(rows, axis=-2)


def quat_exp(psi: np.ndarray) -> np.ndarray:
    """Exponential map: rotation vector (rad) -> unit quaternion.

    Total function; uses a series branch below ~1e-8 rad so the zero
    rotation maps exactly to the identity quaternion.
    """
    psi = np.asarray(psi, dtype=float)
    theta = np.linalg.norm(psi, axis=-1, keepdims=True)
    half = 0.5 * theta
    small = theta < _SMALL_ANGLE
    theta_safe = np.where(small, 1.0, theta)
    # sin(theta/2)/theta, series-expanded near zero
    k = np.where(small, 0.5 - theta * theta / 48.0, np.sin(half) / theta_safe)
    w = np.cos(half)
    out = np.concatenate([w, k * psi], axis=-1)
    return quat_normalize(out)


def quat_log(q: np.ndarray) -> np.ndarray:
    """Rotation vector of q (inverse of quat_exp), in (-pi, pi]."""
    q = quat_normalize(np.asarray(q, dtype=float))
    s = np.linalg.norm(q[..., 1:4], axis=-1, keepdims=True)
    w = q[..., :1]
    small = s < 1e-12
    s_safe = np.where(small, 1.0, s)
    angle = 2.0 * np.arctan2(s, w)
    k = np.where(small, 2.0 / np.maximum(w, 1e-12), angle / s_safe)
    return k * q[..., 1:4]


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix v^x, shape (..., 3, 3)."""
    v = np.asarray(v, dtype=float)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    o = np.zeros_like(x)
    rows = [
        np.stack([o, -z, y], axis=-1),
        np.stack([z, o, -x], axis=-1),
        np.stack([-y, x, o], axis=-1),
    ]
    return np.stack(rows, axis=-2)


def bearing(q: np.ndarray) -> np.ndarray:
    """Unit line-of-sight vector n(q) = rotmat(q) @ e_z."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack(
        [2 * (x * z + w * y), 2 * (y * z - w * x), 1 - 2 * (x * x + y * y)],
        axis=-1,
    )


def tangent_basis(q: np.ndarray) -> np.ndarray:
    """Rotated x/y axes [C(q) e_x, C(q) e_y], shape (..., 3, 2).

    Columns are orthonormal and orthogonal to ``bearing(q)``; they are
    the basis in which 2-D bearing increments are expressed.
    """
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    cx = np.stack(
        [1 - 2 * (y * y + z * z), 2 * (x * y + w * z), 2 * (x * z - w * y)],
        axis=-1,
    )
    cy = np.stack(
        [2 * (x * y - w * z), 1 - 2 * (x * x + z * z), 2 * (y * z + w * x)],
        axis=-1,
    )
    return np.stack([cx, cy], axis=-1)


def _fallback_axis(rho: np.ndarray) -> np.ndarray:
    """Deterministic axis orthogonal to rho for the antipodal case.

    Projects e_x out of rho; if rho is (anti)parallel to e_x the
    projection degenerates and e_y is used instead.
    """
    a = EX - np.sum(rho * EX, axis=-1, keepdims=True) * rho
    an = np.linalg.norm(a, axis=-1, keepdims=True)
    b = EY - np.sum(rho * EY, axis=-1, keepdims=True) * rho
    bn = np.linalg.norm(b, axis=-1, keepdims=True)
    use_a = an > _PARALLEL_TOL
    axis = np.where(
        use_a,
        a / np.where(use_a, an, 1.0),
        b / np.where(use_a, 1.0, np.maximum(bn, _PARALLEL_TOL)),
    )
    return axis


def min_rotation(rho1: np.ndarray, rho2: np.ndarray) -> np.ndarray:
    """Minimal rotation vector taking unit vector rho1 onto rho2.

    Returns ``arccos(rho1 . rho2) * (rho1 x rho2) / |rho1 x rho2|``.
    Near-parallel pairs fall back to the first-order limit
    (the unnormalized cross product, since angle/sin(angle) -> 1);
    antipodal pairs return a pi rotation about a deterministic
    orthogonal fallback axis.
    """
    rho1 = np.asarray(rho1, dtype=float)
    rho2 = np.asarray(rho2, dtype=float)
    dot = np.sum(rho1 * rho2, axis=-1, keepdims=True)
    cr = cross3(rho1, rho2)
    cn = np.linalg.norm(cr, axis=-1, keepdims=True)
    # atan2 form of arccos(dot): identical value, no precision cliff
    # for nearly parallel inputs
    angle = np.arctan2(cn, dot)
    degenerate = cn < _PARALLEL_TOL
    scale = np.where(degenerate, 1.0, angle / np.where(degenerate, 1.0, cn))
    out = scale * cr
    anti = dot < (-1.0 + _PARALLEL_TOL)
    if np.any(anti):
        rho1b = np.broadcast_to(rho1, np.broadcast_shapes(rho1.shape, rho2.shape))
        axis = _fallback_axis(rho1b)
        out = np.where(anti, np.pi * axis, out)
    return out


def boxplus(q: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Retract a 2-D tangent increment onto the bearing rotation.

    q [+] a = quat_exp(tangent_basis(q) @ a) (x) q.  Valid for
    |a| < pi.
    """
    q = np.asarray(q, dtype=float)
    a = np.asarray(a, dtype=float)
    w = np.einsum("...ij,...j->...i", tangent_basis(q), a)
    return quat_mul(quat_exp(w), q)


def boxminus(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """2-D tangent difference such that (q2 [+] (q1 [-] q2)) has the
    bearing of q1.

    Computed as ``tangent_basis(q2)^T min_rotation(bearing(q2),
    bearing(q1))``; the argument order is fixed by the round-trip
    identity ``(q [+] a) [-] q == a``.
    """
    th = min_rotation(bearing(q2), bearing(q1))
    return np.einsum("...ji,...j->...i", tangent_basis(q2), th)


def bearing_jacobian(q: np.ndarray) -> np.ndarray:
    """d bearing(q [+] a) / d a at a = 0: the 3x2 matrix -n(q)^x N(q)."""
    q = np.asarray(q, dtype=float)
    return -np.matmul(skew(bearing(q)), tangent_basis(q))


def from_bearing(rho: np.ndarray) -> np.ndarray:
    """Bearing rotation whose bearing equals the given unit vector.

    Uses the minimal rotation from the optical axis; for rho ~ -e_z the
    antipodal fallback axis (e_x) applies.
    """
    rho = np.asarray(rho, dtype=float)
    return quat_exp(min_rotation(np.broadcast_to(EZ, rho.shape), rho))


def so3_right_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian of the rotation exponential, (..., 3, 3).

    Maps body angular velocity to the rate of the local rotation-vector
    coordinate when integrating attitude in a chart fixed across a step.
    """
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    sk = skew(phi)
    sk2 = np.matmul(sk, sk)
    small = theta < _SMALL_ANGLE
    theta_safe = np.where(small, 1.0, theta)
    c = np.where(
        small,
        1.0 / 12.0,
        1.0 / theta_safe**2
        - (1.0 + np.cos(theta_safe)) / (2.0 * theta_safe * np.sin(theta_safe)),
    )
    eye = np.broadcast_to(np.eye(3), sk.shape)
    return eye + 0.5 * sk + c[..., None, None] * sk2


def euler_zyx(q: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(roll, pitch, yaw) of q under the aerospace Z-Y-X convention."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    roll = np.arctan2(2 * (w * x + y * z), 1 - 2 * (x * x + y * y))
    pitch = np.arcsin(np.clip(2 * (w * y - z * x), -1.0, 1.0))
    yaw = np.arctan2(2 * (w * z + x * y), 1 - 2 * (y * y + z * z))
    return roll, pitch, yaw


def yaw_quat(q: np.ndarray) -> np.ndarray:
    """Yaw-only (heading) part of an attitude quaternion."""
    _, _, yaw = euler_zyx(q)
    half = 0.5 * np.asarray(yaw, dtype=float)[..., None]
    zero = np.zeros_like(half)
    return np.concatenate([np.cos(half), zero, zero, np.sin(half)], axis=-1)
