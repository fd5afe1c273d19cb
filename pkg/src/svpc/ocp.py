"""Optimal control problem assembly: costs, soft constraints, references.

Everything here is a pure evaluator over a candidate state/input/slack
triple; the solver owns transcription and minimization.  Public
functions take the dataclass state types; the ``*_packed`` variants
operate on packed float arrays and broadcast over leading axes so the
solver can difference whole trajectories in one sweep.

The stage objective has three parts:

* action: weighted squared errors of target-relative position (the
  predicted feature re-expressed in the world frame, PBVS-style),
  velocity, attitude quaternion, and input;
* perception: squared horizontal normalized image coordinate, steering
  the camera to face the target -- deliberately no vertical term, which
  would fight the pitch motion the action objective needs;
* slack penalty: L2 + L1 on the nonnegative per-stage slack shared by
  all soft constraint rows.

Soft constraint rows (per stage, all of the form h <= z): four
image-bound rows in the actual (not attitude-derotated) image plane, a
front-hemisphere row, and a closing-speed row -- either time-to-
collision (closing_rate / r <= 1 / t_c_min), plain distance (r >= 0),
or nothing, selectable for ablations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .camera import EPS_FRONT, BehindCameraError, ImageBound
from .dynamics import (
    R_MIN,
    ControlInput,
    RigExtrinsics,
    ServoState,
    WorldConstants,
    camera_twist,
    camera_twist_packed,
    pack_input,
    pack_state,
)
from .manifold import bearing, rotate

# residual layout per stage: 3 position + 3 velocity + 4 attitude
# + 4 input + 1 perception
STAGE_RESIDUAL_DIM = 15
TERMINAL_RESIDUAL_DIM = 11  # no input block


class ConstraintMode(str, Enum):
    TTC = "ttc"
    DISTANCE = "distance"
    NONE = "none"


@dataclass(eq=False)
class OcpWeights:
    """Diagonal objective weights and slack penalties."""

    q_p: np.ndarray = field(default_factory=lambda: np.full(3, 10.0))
    q_v: np.ndarray = field(default_factory=lambda: np.ones(3))
    q_att: np.ndarray = field(default_factory=lambda: np.ones(4))
    r_u: np.ndarray = field(default_factory=lambda: np.array([0.1, 1.0, 1.0, 1.0]))
    q_u: float = 5.0
    w_z_l1: float = 50.0
    w_z_l2: float = 500.0

    def __post_init__(self):
        self.q_p = np.asarray(self.q_p, dtype=float)
        self.q_v = np.asarray(self.q_v, dtype=float)
        self.q_att = np.asarray(self.q_att, dtype=float)
        self.r_u = np.asarray(self.r_u, dtype=float)
        for name in ("q_p", "q_v", "q_att", "r_u"):
            if np.any(getattr(self, name) < 0):
                raise ValueError(f"{name} must be nonnegative")
        if self.q_u < 0:
            raise ValueError("q_u must be nonnegative")
        if self.w_z_l1 <= 0 or self.w_z_l2 <= 0:
            raise ValueError("slack weights must be positive")


@dataclass(eq=False)
class OcpReferences:
    """Reference relative position, velocity, attitude, and input.

    ``p_star`` may be left unset and derived from the reference feature
    direction and stand-off range through the rig: the world-frame
    offset of a target sitting at range r_star along rho_star when the
    vehicle holds the reference attitude.
    """

    rho_star: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    r_star: float = 2.0
    v_star: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q_wb_star: np.ndarray = field(default_factory=lambda: np.array([1.0, 0, 0, 0]))
    u_star: np.ndarray = field(default_factory=lambda: np.array([9.81, 0.0, 0.0, 0.0]))
    p_star: np.ndarray | None = None
    # cap on the commanded relative-position error per solve; acts as a
    # one-step path plan toward p_star, bounding the cost gradient when
    # the target is far (None disables)
    error_clip: float | None = None

    def __post_init__(self):
        self.rho_star = np.asarray(self.rho_star, dtype=float)
        self.v_star = np.asarray(self.v_star, dtype=float)
        self.q_wb_star = np.asarray(self.q_wb_star, dtype=float)
        self.q_wb_star = self.q_wb_star / np.linalg.norm(self.q_wb_star)
        self.u_star = np.asarray(self.u_star, dtype=float)
        if self.r_star <= 0:
            raise ValueError("r_star must be positive")
        if self.error_clip is not None and self.error_clip <= 0:
            raise ValueError("error_clip must be positive")
        if self.p_star is not None:
            self.p_star = np.asarray(self.p_star, dtype=float)

    def resolve(self, rig: RigExtrinsics) -> "OcpReferences":
        """Fill p_star from (rho_star, r_star) if it was not given."""
        if self.p_star is None:
            cam = rotate(rig.q_bc, self.rho_star * self.r_star) + rig.p_cb_b
            self.p_star = rotate(self.q_wb_star, cam)
        return self

    def clipped_to(self, p_rel: np.ndarray) -> "OcpReferences":
        """References with p_star pulled within error_clip of the
        current relative position (identity when already close)."""
        if self.error_clip is None:
            return self
        err = p_rel - self.p_star
        d = float(np.linalg.norm(err))
        if d <= self.error_clip:
            return self
        eff = OcpReferences(
            rho_star=self.rho_star,
            r_star=self.r_star,
            v_star=self.v_star,
            q_wb_star=self.q_wb_star,
            u_star=self.u_star,
            p_star=p_rel - err * (self.error_clip / d),
            error_clip=self.error_clip,
        )
        return eff


@dataclass(eq=False)
class ConstraintSet:
    """Visibility bound, closing-speed constraint, and actuation box."""

    bound: ImageBound
    t_c_min: float = 2.0
    c_min: float = 2.0
    c_max: float = 20.0
    omega_max: np.ndarray = field(default_factory=lambda: np.array([3.0, 3.0, 2.0]))
    mode: ConstraintMode = ConstraintMode.TTC

    def __post_init__(self):
        self.omega_max = np.asarray(self.omega_max, dtype=float)
        self.mode = ConstraintMode(self.mode)
        if self.t_c_min <= 0:
            raise ValueError("t_c_min must be positive")
        if self.c_min >= self.c_max:
            raise ValueError("need c_min < c_max")
        if np.any(self.omega_max <= 0):
            raise ValueError("omega_max must be positive")

    @property
    def n_soft_rows(self) -> int:
        return 5 if self.mode == ConstraintMode.NONE else 6

    def input_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.concatenate([[self.c_min], -self.omega_max])
        hi = np.concatenate([[self.c_max], self.omega_max])
        return lo, hi


@dataclass(frozen=True)
class Horizon:
    n_steps: int = 20
    dt: float = 0.05

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("horizon needs at least one step")
        if self.dt <= 0:
            raise ValueError("dt must be positive")


@dataclass(eq=False)
class OcpProblem:
    """Everything one receding-horizon solve needs."""

    horizon: Horizon
    weights: OcpWeights
    references: OcpReferences
    constraints: ConstraintSet
    rig: RigExtrinsics
    world: WorldConstants = field(default_factory=WorldConstants)
    eps_front: float = EPS_FRONT
    r_min: float = R_MIN
    # solver-facing floor for the perspective division: predicted
    # states can sweep the bearing toward the hemisphere edge, where
    # dividing by n_z ~ eps_front would produce residuals and gradients
    # in the hundreds and destabilize the QP; every physically visible
    # direction has n_z well above this
    div_floor: float = 0.1

    def __post_init__(self):
        self.references.resolve(self.rig)


def relative_position_packed(X: np.ndarray, rig: RigExtrinsics) -> np.ndarray:
    """Target position relative to the body, expressed in world axes."""
    q_wb = X[..., 3:7]
    n = bearing(X[..., 7:11])
    r = X[..., 11:12]
    return rotate(q_wb, rotate(rig.q_bc, n * r) + rig.p_cb_b)


def relative_position(x: ServoState, rig: RigExtrinsics) -> np.ndarray:
    return relative_position_packed(pack_state(x), rig)


def _aligned_quat_error(q: np.ndarray, q_ref: np.ndarray) -> np.ndarray:
    """Component-wise quaternion error after hemisphere alignment.

    Flipping the sign when q . q_ref < 0 removes the double-cover
    ambiguity while keeping the plain quadratic form.
    """
    s = np.where(np.sum(q * q_ref, axis=-1, keepdims=True) < 0.0, -1.0, 1.0)
    return s * q - q_ref


def _xbar_clamped(X: np.ndarray, floor: float) -> np.ndarray:
    """Horizontal normalized coordinate with the division floored,
    keeping solver residuals and gradients bounded everywhere."""
    n = bearing(X[..., 7:11])
    return n[..., 0] / np.maximum(n[..., 2], floor)


def _ybar_clamped(X: np.ndarray, floor: float) -> np.ndarray:
    n = bearing(X[..., 7:11])
    return n[..., 1] / np.maximum(n[..., 2], floor)


def stage_residuals_packed(
    X: np.ndarray, U: np.ndarray, prob: OcpProblem
) -> np.ndarray:
    """Weighted Gauss-Newton residual vector, shape (..., 15).

    The stage cost is the squared norm of this vector.
    """
    w, refs = prob.weights, prob.references
    r_p = np.sqrt(w.q_p) * (relative_position_packed(X, prob.rig) - refs.p_star)
    r_v = np.sqrt(w.q_v) * (X[..., 0:3] - refs.v_star)
    r_q = np.sqrt(w.q_att) * _aligned_quat_error(X[..., 3:7], refs.q_wb_star)
    r_u = np.sqrt(w.r_u) * (U - refs.u_star)
    r_per = np.sqrt(w.q_u) * _xbar_clamped(X, prob.div_floor)[..., None]
    return np.concatenate([r_p, r_v, r_q, r_u, r_per], axis=-1)


def terminal_residuals_packed(X: np.ndarray, prob: OcpProblem) -> np.ndarray:
    """State-only residual vector for the end of the horizon, (..., 11)."""
    w, refs = prob.weights, prob.references
    r_p = np.sqrt(w.q_p) * (relative_position_packed(X, prob.rig) - refs.p_star)
    r_v = np.sqrt(w.q_v) * (X[..., 0:3] - refs.v_star)
    r_q = np.sqrt(w.q_att) * _aligned_quat_error(X[..., 3:7], refs.q_wb_star)
    r_per = np.sqrt(w.q_u) * _xbar_clamped(X, prob.div_floor)[..., None]
    return np.concatenate([r_p, r_v, r_q, r_per], axis=-1)


def soft_rows_packed(X: np.ndarray, U: np.ndarray, prob: OcpProblem) -> np.ndarray:
    """Soft-constraint residual rows g(x, u), satisfied when g <= z.

    Rows: [x_n - sx, -x_n - sx, y_n - sy, -y_n - sy, eps_front - n_z,
    closing-speed row (mode-dependent)].  Behind-camera states receive
    the finite sentinel on the image rows; the front-hemisphere row
    carries the restoring gradient.
    """
    return _soft_rows_from(bearing(X[..., 7:11]), X, U, prob)


def _soft_rows_from(
    n: np.ndarray, X: np.ndarray, U: np.ndarray, prob: OcpProblem
) -> np.ndarray:
    bound = prob.constraints.bound
    sx, sy = bound.half_width_n, bound.half_height_n
    behind = n[..., 2] <= prob.eps_front
    nz = np.maximum(n[..., 2], prob.div_floor)
    xbar = n[..., 0] / nz
    ybar = n[..., 1] / nz
    rows = [
        np.where(behind, 10.0 * sx, xbar - sx),
        np.where(behind, 10.0 * sx, -xbar - sx),
        np.where(behind, 10.0 * sy, ybar - sy),
        np.where(behind, 10.0 * sy, -ybar - sy),
        prob.eps_front - n[..., 2],
    ]
    mode = prob.constraints.mode
    if mode == ConstraintMode.TTC:
        v_c, _ = camera_twist_packed(X, U, prob.rig)
        closing = np.sum(n * v_c, axis=-1)
        r_eff = np.maximum(X[..., 11], prob.r_min)
        rows.append(closing / r_eff - 1.0 / prob.constraints.t_c_min)
    elif mode == ConstraintMode.DISTANCE:
        rows.append(-X[..., 11])
    return np.stack(rows, axis=-1)


def stage_eval_packed(
    X: np.ndarray, U: np.ndarray, prob: OcpProblem
) -> tuple[np.ndarray, np.ndarray]:
    """Residual vector and soft rows in one pass (shared bearing work).

    Identical values to stage_residuals_packed / soft_rows_packed; used
    by the solver where both are needed for the same points.
    """
    w, refs = prob.weights, prob.references
    q_wb = X[..., 3:7]
    n = bearing(X[..., 7:11])
    p_rel = rotate(q_wb, rotate(prob.rig.q_bc, n * X[..., 11:12]) + prob.rig.p_cb_b)
    r_p = np.sqrt(w.q_p) * (p_rel - refs.p_star)
    r_v = np.sqrt(w.q_v) * (X[..., 0:3] - refs.v_star)
    r_q = np.sqrt(w.q_att) * _aligned_quat_error(q_wb, refs.q_wb_star)
    r_u = np.sqrt(w.r_u) * (U - refs.u_star)
    xbar = n[..., 0] / np.maximum(n[..., 2], prob.div_floor)
    r_per = np.sqrt(w.q_u) * xbar[..., None]
    res = np.concatenate([r_p, r_v, r_q, r_u, r_per], axis=-1)
    return res, _soft_rows_from(n, X, U, prob)


# -- public, spec-level operations ------------------------------------------


def action_cost(
    x: ServoState,
    u: ControlInput,
    refs: OcpReferences,
    weights: OcpWeights,
    rig: RigExtrinsics,
) -> float:
    """Tracking/stabilization cost: position + velocity + attitude +
    input quadratic terms."""
    refs.resolve(rig)
    p_err = relative_position(x, rig) - refs.p_star
    v_err = x.v_w - refs.v_star
    q_err = _aligned_quat_error(x.q_wb, refs.q_wb_star)
    u_err = pack_input(u) - refs.u_star
    return float(
        p_err @ (weights.q_p * p_err)
        + v_err @ (weights.q_v * v_err)
        + q_err @ (weights.q_att * q_err)
        + u_err @ (weights.r_u * u_err)
    )


def perception_cost(x: ServoState, weights: OcpWeights) -> float:
    """Q_u-weighted squared horizontal image coordinate.

    There is intentionally no vertical counterpart: pitching to
    accelerate moves the feature vertically, and penalizing that would
    fight the action objective.
    """
    n = bearing(x.q)
    if n[2] <= EPS_FRONT:
        raise BehindCameraError("perception cost undefined behind the camera")
    xbar = n[0] / n[2]
    return float(weights.q_u * xbar * xbar)


def visibility_residuals(x: ServoState, bound: ImageBound) -> np.ndarray:
    """Four signed image-bound rows (positive = violation needing slack).

    Total function: behind-camera states get a large finite sentinel
    (10x the bound) instead of a meaningless perspective division, so
    the solver always sees bounded numbers.
    """
    n = bearing(x.q)
    sx, sy = bound.half_width_n, bound.half_height_n
    if n[2] <= EPS_FRONT:
        return np.array([10.0 * sx, 10.0 * sx, 10.0 * sy, 10.0 * sy])
    xbar, ybar = n[0] / n[2], n[1] / n[2]
    return np.array([xbar - sx, -xbar - sx, ybar - sy, -ybar - sy])


def ttc_residual(
    x: ServoState, u: ControlInput, rig: RigExtrinsics, t_c_min: float
) -> float:
    """Signed time-to-collision row: closing_rate / r - 1 / t_c_min.

    closing_rate is the positive-when-approaching range rate, so states
    that are leaving the target are always feasible and approaching
    states must keep range / closing_rate >= t_c_min.
    """
    if x.r <= 0:
        raise ValueError("range must be positive")
    v_c, _ = camera_twist(x, u, rig)
    closing = float(np.dot(bearing(x.q), v_c))
    return closing / x.r - 1.0 / t_c_min


def slack_penalty(z, weights: OcpWeights) -> float:
    """L2 + L1 penalty on nonnegative slack."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    return float(weights.w_z_l2 * z @ z + weights.w_z_l1 * np.sum(np.abs(z)))


def stage_cost(
    x: ServoState,
    u: ControlInput,
    z,
    refs: OcpReferences,
    weights: OcpWeights,
    rig: RigExtrinsics,
) -> float:
    return (
        action_cost(x, u, refs, weights, rig)
        + perception_cost(x, weights)
        + slack_penalty(z, weights)
    )
