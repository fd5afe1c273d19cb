"""Coupled quadrotor / image / range dynamics and discrete predictors.

State x = [v_w, q_wb, q, r]: world velocity, body attitude, bearing
rotation of the tracked feature, and range to the target.  Input
u = [c, omega_b]: mass-normalized collective thrust and body rates.

The continuous dynamics:

    v_w'   = C(q_wb) (0,0,c) + g
    q_wb'  = body-rate kinematics (right multiplication by omega_b)
    q'     = N(q)^T (-n(q)^x v_c / r - omega_c)
    r'     = -n(q)^T v_c

with (v_c, omega_c) the camera-frame twist obtained from the state and
the rig extrinsics.  The range equation has no angular-velocity term:
rotating the camera never changes the measured range, which is what
makes the bearing/range split well suited to an underactuated vehicle.

For numerical work states are packed into flat float arrays

    packed state (12,) = [v_w(3), q_wb(4), q(4), r]
    packed input (4,)  = [c, omega_b(3)]

and all packed functions broadcast over leading axes, which the solver
uses to evaluate finite-difference Jacobians in one vectorized sweep.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .manifold import (
    bearing,
    cross3,
    boxplus,
    boxminus,
    quat_conj,
    quat_exp,
    quat_log,
    quat_mul,
    quat_normalize,
    rotate,
    tangent_basis,
)

# Range is clamped away from zero inside integration: the image
# kinematics divide by r and degenerate shooting iterates must not
# produce infinities.
R_MIN = 0.05

STATE_DIM = 12
TANGENT_DIM = 9  # [dv(3), d_att(3), d_feat(2), dr]
INPUT_DIM = 4

_SMALL = 1e-8

GRAVITY_W = np.array([0.0, 0.0, -9.81])


@dataclass(frozen=True, eq=False)
class WorldConstants:
    g_w: np.ndarray = field(default_factory=lambda: GRAVITY_W.copy())


@dataclass(frozen=True, eq=False)
class RigExtrinsics:
    """Camera mount: camera origin in the body frame and camera->body
    rotation."""

    p_cb_b: np.ndarray
    q_bc: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "p_cb_b", np.asarray(self.p_cb_b, dtype=float))
        object.__setattr__(self, "q_bc", quat_normalize(self.q_bc))


@dataclass(eq=False)
class ServoState:
    """NMPC state: world velocity, attitude, feature rotation, range."""

    v_w: np.ndarray
    q_wb: np.ndarray
    q: np.ndarray
    r: float

    def __post_init__(self):
        self.v_w = np.asarray(self.v_w, dtype=float)
        self.q_wb = quat_normalize(self.q_wb)
        self.q = quat_normalize(self.q)
        self.r = float(self.r)
        if self.r <= 0:
            raise ValueError("range must be positive")

    def copy(self) -> "ServoState":
        return ServoState(self.v_w.copy(), self.q_wb.copy(), self.q.copy(), self.r)


@dataclass(frozen=True, eq=False)
class ControlInput:
    """Mass-normalized thrust [m/s^2] and body rates [rad/s]."""

    c: float
    omega_b: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "omega_b", np.asarray(self.omega_b, dtype=float))


def pack_state(x: ServoState) -> np.ndarray:
    return np.concatenate([x.v_w, x.q_wb, x.q, [x.r]])


def unpack_state(vec: np.ndarray) -> ServoState:
    vec = np.asarray(vec, dtype=float)
    return ServoState(vec[0:3], vec[3:7], vec[7:11], vec[11])


def pack_input(u: ControlInput) -> np.ndarray:
    return np.concatenate([[u.c], u.omega_b])


def unpack_input(vec: np.ndarray) -> ControlInput:
    vec = np.asarray(vec, dtype=float)
    return ControlInput(float(vec[0]), vec[1:4])


def camera_twist_packed(X: np.ndarray, U: np.ndarray, rig: RigExtrinsics):
    """Camera-frame linear and angular velocity for packed states/inputs."""
    v_w = X[..., 0:3]
    q_wb = X[..., 3:7]
    om = U[..., 1:4]
    q_cb = quat_conj(rig.q_bc)
    v_b = rotate(quat_conj(q_wb), v_w) + cross3(om, rig.p_cb_b)
    return rotate(q_cb, v_b), rotate(q_cb, om)


def camera_twist(x: ServoState, u: ControlInput, rig: RigExtrinsics):
    """Camera-frame twist (v_c, omega_c) induced by the vehicle motion.

    v_c picks up the lever-arm term omega x p_cb from the camera
    offset; omega_c is the body rate re-expressed in camera axes.
    """
    v_c, om_c = camera_twist_packed(pack_state(x), pack_input(u), rig)
    return v_c, om_c


def feature_rate(q, r, v_c, omega_c) -> np.ndarray:
    """Tangent-space rate of the bearing rotation, rad/s (2-vector)."""
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0):
        raise ValueError("range must be positive")
    n = bearing(q)
    vec = -cross3(n, v_c) / r[..., None] - omega_c
    return np.einsum("...ji,...j->...i", tangent_basis(q), vec)


def range_rate(q, v_c) -> float | np.ndarray:
    """Range rate -n(q)^T v_c; negative while closing in along the bearing."""
    n = bearing(q)
    out = -np.sum(n * np.asarray(v_c, dtype=float), axis=-1)
    return float(out) if out.ndim == 0 else out


def quad_rates(x: ServoState, u: ControlInput, world: WorldConstants):
    """Translational acceleration and attitude quaternion derivative.

    v' = C(q_wb)(0,0,c) + g.  The attitude derivative corresponds to
    body rates applied in the body frame: q_wb' = 1/2 q_wb (x) (0, omega).
    """
    v_dot = rotate(x.q_wb, np.array([0.0, 0.0, u.c])) + world.g_w
    ow = np.concatenate([[0.0], u.omega_b])
    pw, px, py, pz = x.q_wb
    qw, qx, qy, qz = ow
    q_dot = 0.5 * np.array(
        [
            pw * qw - px * qx - py * qy - pz * qz,
            pw * qx + px * qw + py * qz - pz * qy,
            pw * qy - px * qz + py * qw + pz * qx,
            pw * qz + px * qy - py * qx + pz * qw,
        ]
    )
    return v_dot, q_dot


def bearing_omega(n: np.ndarray, r, v_c, omega_c) -> np.ndarray:
    """Instantaneous angular velocity of the bearing direction.

    -n^x v_c / r - (I - n n^T) omega_c; always orthogonal to n, so the
    induced rotation carries no twist about the line of sight.
    """
    r = np.asarray(r, dtype=float)
    omega_c = np.asarray(omega_c, dtype=float)
    perp = omega_c - n * np.sum(n * omega_c, axis=-1, keepdims=True)
    return -cross3(n, v_c) / r[..., None] - perp


def predict_feature(q, r, v_c, omega_c, dt: float) -> np.ndarray:
    """One explicit step of the bearing rotation over dt.

    Evaluates both algebraically identical forms -- the tangent
    retraction q [+] (rate * dt) and the direct exponential update
    exp(Omega * dt) (x) q -- and cross-checks them to 1e-10 before
    returning, which guards the tangent-projection identities at run
    time.
    """
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0):
        raise ValueError("range must be positive")
    q = np.asarray(q, dtype=float)
    qa = boxplus(q, feature_rate(q, r, v_c, omega_c) * dt)
    n = bearing(q)
    qb = quat_mul(quat_exp(bearing_omega(n, r, v_c, omega_c) * dt), q)
    err = np.max(np.abs(qa - qb))
    if err > 1e-10:
        raise AssertionError(f"feature predictor self-check failed: {err:.3e}")
    return qa


def _sphere_exp(n0: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Geodesic exponential on the unit sphere: rotate n0 along tangent w."""
    rho = np.linalg.norm(w, axis=-1, keepdims=True)
    small = rho < 1e-12
    rho_safe = np.where(small, 1.0, rho)
    sinc = np.where(small, 1.0 - rho * rho / 6.0, np.sin(rho_safe) / rho_safe)
    return np.cos(rho) * n0 + sinc * w


def _sphere_exp_pullback(n0: np.ndarray, w: np.ndarray, n: np.ndarray,
                         n_dot: np.ndarray) -> np.ndarray:
    """Chart rate w' such that d/dt Exp_{n0}(w) = n_dot.

    Transports n_dot back to the tangent plane at n0 along the
    connecting geodesic and undoes the sin(rho)/rho tangential
    contraction of the exponential map.  Exact for |w| < pi, which a
    single integration step never approaches.
    """
    rho = np.linalg.norm(w, axis=-1, keepdims=True)
    small = (rho < 1e-9)[..., 0]
    rho_safe = np.where(rho < 1e-9, 1.0, rho)
    u = w / rho_safe
    axis = cross3(n0, u)
    back = quat_exp(-rho * axis)
    nd0 = rotate(back, n_dot)
    # numerical dust out of the tangent plane
    nd0 = nd0 - n0 * np.sum(n0 * nd0, axis=-1, keepdims=True)
    radial = np.sum(nd0 * u, axis=-1, keepdims=True)
    stretch = rho / np.sin(np.clip(rho_safe, 1e-12, np.pi - 1e-9))
    w_dot = radial * u + stretch * (nd0 - radial * u)
    return np.where(small[..., None], n_dot, w_dot)


def integrate_packed(
    X: np.ndarray,
    U: np.ndarray,
    rig: RigExtrinsics,
    world: WorldConstants,
    dt: float,
    r_min: float = R_MIN,
) -> np.ndarray:
    """Fourth-order step of the full state, broadcast over leading axes.

    Integration runs in a chart fixed at the start of the step: the
    attitude as a body rotation-vector increment (exact under the
    zero-order-hold body rates), the feature bearing as 2-D geodesic
    displacement coordinates through the sphere exponential (a smooth
    chart, so the classic RK4 order is preserved), velocity and range
    as plain vectors.  Increments are applied through the exponential
    maps / the bearing retraction at the end, so both quaternions stay
    unit to machine precision.

    The stage derivative is hand-inlined: it dominates the solver's
    finite-difference sweeps, so per-call numpy overhead matters more
    than elegance here.  The math is identical to composing
    camera_twist / bearing_omega / the sphere-exp pullback.
    """
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float)
    v0 = X[..., 0:3]
    qa0 = X[..., 3:7]
    qf0 = X[..., 7:11]
    r0 = X[..., 11:12]
    c = U[..., 0:1]
    om = U[..., 1:4]

    n0 = bearing(qf0)
    N0 = tangent_basis(qf0)
    q_cb = quat_conj(rig.q_bc)
    om_c = rotate(q_cb, om)
    lever = cross3(om, rig.p_cb_b)
    lever_b = rotate(q_cb, lever)  # camera-frame lever term, constant
    g_w = world.g_w

    qa0w, qa0v = qa0[..., :1], qa0[..., 1:4]
    cbw, cbv = float(q_cb[0]), q_cb[1:4]

    def deriv(y: np.ndarray) -> np.ndarray:
        v = y[..., 0:3]
        phi = y[..., 3:6]
        a = y[..., 6:8]
        r = np.maximum(y[..., 8:9], r_min)

        # qa = qa0 (x) exp(phi), unnormalized (phi per stage is tiny)
        theta = np.sqrt(np.sum(phi * phi, axis=-1, keepdims=True))
        half = 0.5 * theta
        small = theta < _SMALL
        k = np.where(small, 0.5 - theta * theta / 48.0,
                     np.sin(half) / np.where(small, 1.0, theta))
        ew = np.cos(half)
        ev = k * phi
        qw = qa0w * ew - np.sum(qa0v * ev, axis=-1, keepdims=True)
        qv = qa0w * ev + ew * qa0v + cross3(qa0v, ev)

        # v_dot = C(qa) e_z c + g  (rotation of (0,0,c) expanded)
        tz = 2.0 * (qv[..., 0:1] * qv[..., 2:3] + qw * qv[..., 1:2])
        ty = 2.0 * (qv[..., 1:2] * qv[..., 2:3] - qw * qv[..., 0:1])
        tzz = 1.0 - 2.0 * (qv[..., 0:1] ** 2 + qv[..., 1:2] ** 2)
        v_dot = np.concatenate([tz * c, ty * c, tzz * c], axis=-1) + g_w

        # v in body axes: C(qa)^T v = rotate(conj(qa), v)
        t = 2.0 * cross3(-qv, v)
        v_b = v + qw * t + cross3(-qv, t)
        # to camera axes, plus the lever term
        t = 2.0 * cross3(cbv, v_b)
        v_cam = v_b + cbw * t + cross3(cbv, t) + lever_b

        # bearing at the chart point
        rho = np.sqrt(np.sum(a * a, axis=-1, keepdims=True))
        w_vec = np.einsum("...ij,...j->...i", N0, a)
        sm = rho < 1e-12
        rho_s = np.where(sm, 1.0, rho)
        sinc = np.where(sm, 1.0 - rho * rho / 6.0, np.sin(rho_s) / rho_s)
        n = np.cos(rho) * n0 + sinc * w_vec

        ndotn = np.sum(n * om_c, axis=-1, keepdims=True)
        omega_n = -cross3(n, v_cam) / r - (om_c - n * ndotn)
        n_dot = cross3(omega_n, n)

        # pull the bearing rate back to the chart at n0
        u = w_vec / rho_s
        axis = cross3(n0, u)
        sa, ca = np.sin(rho), np.cos(rho)
        nd0 = (ca * n_dot + (1.0 - ca) * axis * np.sum(axis * n_dot, axis=-1,
                                                       keepdims=True)
               - sa * cross3(axis, n_dot))
        nd0 = nd0 - n0 * np.sum(n0 * nd0, axis=-1, keepdims=True)
        radial = np.sum(nd0 * u, axis=-1, keepdims=True)
        stretch = rho / np.where(sm, 1.0, np.sin(np.minimum(rho_s, np.pi - 1e-9)))
        w_dot = np.where(sm, n_dot, radial * u + stretch * (nd0 - radial * u))
        a_dot = np.einsum("...ji,...j->...i", N0, w_dot)

        r_dot = -np.sum(n * v_cam, axis=-1, keepdims=True)
        return np.concatenate([v_dot, om, a_dot, r_dot], axis=-1)

    y0 = np.concatenate(
        [v0, np.zeros(X.shape[:-1] + (5,)), r0], axis=-1
    )
    k1 = deriv(y0)
    k2 = deriv(y0 + 0.5 * dt * k1)
    k3 = deriv(y0 + 0.5 * dt * k2)
    k4 = deriv(y0 + dt * k3)
    y1 = y0 + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    qa1 = quat_mul(qa0, quat_exp(y1[..., 3:6]))
    # displacement coordinates -> retraction increment: the minimal
    # rotation carrying n0 to Exp_{n0}(w) is about the axis n0 x w
    w1 = np.einsum("...ij,...j->...i", N0, y1[..., 6:8])
    a1 = np.einsum("...ji,...j->...i", N0, cross3(n0, w1))
    qf1 = boxplus(qf0, a1)
    r1 = np.maximum(y1[..., 8:9], r_min)
    return np.concatenate([y1[..., 0:3], qa1, qf1, r1], axis=-1)


def integrate_state(
    x: ServoState,
    u: ControlInput,
    rig: RigExtrinsics,
    world: WorldConstants,
    dt: float,
    r_min: float = R_MIN,
) -> ServoState:
    """RK4 step of the coupled vehicle/feature state over dt > 0."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    out = integrate_packed(pack_state(x), pack_input(u), rig, world, dt, r_min)
    return unpack_state(out)


def state_boxplus(X: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Apply a 9-D tangent increment to packed state(s)."""
    X = np.asarray(X, dtype=float)
    delta = np.asarray(delta, dtype=float)
    v = X[..., 0:3] + delta[..., 0:3]
    qa = quat_mul(X[..., 3:7], quat_exp(delta[..., 3:6]))
    qf = boxplus(X[..., 7:11], delta[..., 6:8])
    r = X[..., 11:12] + delta[..., 8:9]
    return np.concatenate([v, qa, qf, r], axis=-1)


def state_boxminus(X1: np.ndarray, X2: np.ndarray) -> np.ndarray:
    """Tangent difference X1 [-] X2 (expressed at X2), shape (..., 9)."""
    X1 = np.asarray(X1, dtype=float)
    X2 = np.asarray(X2, dtype=float)
    dv = X1[..., 0:3] - X2[..., 0:3]
    datt = quat_log(quat_mul(quat_conj(X2[..., 3:7]), X1[..., 3:7]))
    dfeat = boxminus(X1[..., 7:11], X2[..., 7:11])
    dr = X1[..., 11:12] - X2[..., 11:12]
    return np.concatenate([dv, datt, dfeat, dr], axis=-1)
