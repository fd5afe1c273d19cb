"""Receding-horizon solver: multiple shooting + Gauss-Newton SQP.

Transcription keeps every predicted state as a decision variable tied
to its neighbor by the integrated dynamics (shooting gaps); states live
on their manifold and the QP works on tangent increments

    delta = [dx_1 .. dx_N | du_0 .. du_{N-1} | dz_0 .. dz_{N-1}]

with 9-D state tangents (velocity 3, attitude rotation vector 3,
bearing tangent 2, range 1).  Each SQP iteration linearizes dynamics,
cost residuals, and soft rows by vectorized forward differences (one
batched integrator sweep for the whole horizon), assembles a dense QP
with box rows on the inputs and nonnegativity on the slacks, solves it
with the in-repo active-set method, and takes a backtracking step on an
L1 merit function; all trial step lengths are evaluated in a single
vectorized sweep.  A bounded iteration count per control cycle (3 by
default) gives real-time-iteration behavior; warm starts shift the
previous solution by one stage and reuse its active set.

The control buffer stores the full input sequence of the last
successful solve so detection outages can be bridged by replaying the
plan in order; replacement and reads are serialized by a lock.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .dynamics import (
    INPUT_DIM,
    STATE_DIM,
    TANGENT_DIM,
    ControlInput,
    ServoState,
    integrate_packed,
    pack_state,
    state_boxminus,
    state_boxplus,
    unpack_input,
    unpack_state,
)
from .ocp import (
    OcpProblem,
    OcpReferences,
    soft_rows_packed,
    stage_eval_packed,
    stage_residuals_packed,
    terminal_residuals_packed,
)
from .qp import solve_qp

_FD_STEP = 1e-6
_DAMPING = 1e-8
# trial step lengths (scaled by the trust-region cap); the leading 0
# evaluates the incumbent so one batched sweep covers the merit
# reference and every backtracking trial
_ALPHAS = (0.0, 1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125, 0.0078125)
# largest tangent-space step applied in one iteration [rad | m/s | m];
# keeps a single Gauss-Newton linearization inside its validity radius
_TRUST_RADIUS = 1.0
# raise the merit's gap weight to dominate the shooting multipliers
# (exact-penalty condition); can be pinned off for experiments
_ADAPTIVE_MU = True


@dataclass(eq=False)
class Trajectory:
    """Candidate solution: states x_0..x_N, inputs u_0..u_{N-1},
    slacks z_0..z_{N-1} (shared per stage, >= 0)."""

    states: np.ndarray  # (N+1, 12) packed
    inputs: np.ndarray  # (N, 4)
    slacks: np.ndarray  # (N,)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.slacks = np.asarray(self.slacks, dtype=float)
        n = self.inputs.shape[0]
        if self.states.shape != (n + 1, STATE_DIM) or self.slacks.shape != (n,):
            raise ValueError("inconsistent trajectory dimensions")

    @property
    def n_steps(self) -> int:
        return self.inputs.shape[0]

    def state(self, k: int) -> ServoState:
        return unpack_state(self.states[k])

    def input(self, k: int) -> ControlInput:
        return unpack_input(self.inputs[k])

    def copy(self) -> "Trajectory":
        return Trajectory(self.states.copy(), self.inputs.copy(), self.slacks.copy())


@dataclass
class TrajStats:
    merit: float
    objective: float
    max_gap: float
    gap_l1: float
    max_violation: float


@dataclass
class StepReport:
    alpha: float
    step_norm: float
    merit_before: float
    merit_after: float
    qp_status: str
    qp_iterations: int
    active_set: list[int] = field(default_factory=list)
    stats: TrajStats | None = None


@dataclass
class SolveReport:
    iterations: int
    qp_status: str
    max_gap: float
    max_violation: float
    objective: float
    wall_ms: float
    active_set: list[int] = field(default_factory=list)

    CSV_FIELDS = ("iterations", "qp_status", "max_gap", "max_violation",
                  "objective", "wall_ms")

    def csv_row(self) -> str:
        return ",".join(repr(getattr(self, f)) for f in self.CSV_FIELDS)


class SolverError(RuntimeError):
    pass


class TranscribedProblem:
    """Problem pinned to a measured initial state: evaluators, index
    bookkeeping, and preallocated QP structure."""

    def __init__(
        self,
        problem: OcpProblem,
        x_hat: ServoState,
        target_velocity: np.ndarray | None = None,
    ):
        if problem.horizon.n_steps < 1:
            raise ValueError("invalid horizon")
        refs = problem.references
        term_refs = refs
        if target_velocity is not None or refs.error_clip is not None:
            v_t = (
                np.zeros(3)
                if target_velocity is None
                else np.asarray(target_velocity, dtype=float)
            )
            refs = OcpReferences(
                rho_star=refs.rho_star, r_star=refs.r_star,
                v_star=refs.v_star if target_velocity is None else v_t,
                q_wb_star=refs.q_wb_star, u_star=refs.u_star,
                p_star=refs.p_star, error_clip=refs.error_clip,
            )
            if refs.error_clip is not None:
                from .ocp import relative_position

                refs = refs.clipped_to(relative_position(x_hat, problem.rig))
            term_refs = refs
            if target_velocity is not None and np.any(v_t != 0.0):
                # the predictor treats the target as stationary over the
                # horizon; drifting the stage references by the measured
                # target velocity makes the static-model problem agree
                # with the moving-target one to first order
                n, dt = problem.horizon.n_steps, problem.horizon.dt
                drift = dt * np.arange(n + 1)[:, None] * v_t
                stage_p = refs.p_star - drift
                term_refs = OcpReferences(
                    rho_star=refs.rho_star, r_star=refs.r_star,
                    v_star=refs.v_star, q_wb_star=refs.q_wb_star,
                    u_star=refs.u_star, p_star=stage_p[n],
                    error_clip=refs.error_clip,
                )
                refs = OcpReferences(
                    rho_star=refs.rho_star, r_star=refs.r_star,
                    v_star=refs.v_star, q_wb_star=refs.q_wb_star,
                    u_star=refs.u_star, p_star=stage_p[:n],
                    error_clip=refs.error_clip,
                )

        def with_refs(r):
            if r is problem.references:
                return problem
            return OcpProblem(
                horizon=problem.horizon,
                weights=problem.weights,
                references=r,
                constraints=problem.constraints,
                rig=problem.rig,
                world=problem.world,
                eps_front=problem.eps_front,
                r_min=problem.r_min,
                div_floor=problem.div_floor,
            )

        self.problem = with_refs(refs)
        self.problem_terminal = with_refs(term_refs)
        self.x0 = pack_state(x_hat)
        self.n_steps = problem.horizon.n_steps
        self.dt = problem.horizon.dt
        n = self.n_steps
        self.n_soft = problem.constraints.n_soft_rows
        self.dim = n * (TANGENT_DIM + INPUT_DIM + 1)
        self._off_u = n * TANGENT_DIM
        self._off_z = n * (TANGENT_DIM + INPUT_DIM)
        self._build_static_structure()

    # decision-vector layout ------------------------------------------------
    def ix(self, k: int) -> slice:
        """Tangent slice of state k (1..N)."""
        return slice((k - 1) * TANGENT_DIM, k * TANGENT_DIM)

    def iu(self, k: int) -> slice:
        return slice(self._off_u + k * INPUT_DIM, self._off_u + (k + 1) * INPUT_DIM)

    def iz(self, k: int) -> int:
        return self._off_z + k

    def split(self, delta: np.ndarray):
        n = self.n_steps
        dx = delta[: self._off_u].reshape(n, TANGENT_DIM)
        du = delta[self._off_u : self._off_z].reshape(n, INPUT_DIM)
        dz = delta[self._off_z :]
        return dx, du, dz

    def pack(self, traj: Trajectory) -> np.ndarray:
        """Flatten a trajectory (raw packed states, not tangents)."""
        return np.concatenate(
            [traj.states.ravel(), traj.inputs.ravel(), traj.slacks]
        )

    def unpack(self, vec: np.ndarray) -> Trajectory:
        n = self.n_steps
        ns = (n + 1) * STATE_DIM
        return Trajectory(
            vec[:ns].reshape(n + 1, STATE_DIM),
            vec[ns : ns + n * INPUT_DIM].reshape(n, INPUT_DIM),
            vec[ns + n * INPUT_DIM :],
        )

    def _build_static_structure(self):
        """Constant parts of the QP: index grids and fixed matrix
        entries (equality -I blocks, slack column, box identities)."""
        n, ns, dim = self.n_steps, self.n_soft, self.dim
        td, ud = TANGENT_DIM, INPUT_DIM
        self._xcols = np.arange(n * td).reshape(n, td)  # state k+1 -> row k
        self._ucols = self._off_u + np.arange(n * ud).reshape(n, ud)
        self._zcols = self._off_z + np.arange(n)
        # state columns form an invertible block of the equalities
        self.basic_cols = np.arange(n * td)

        # equality rows: block k couples (x_k, u_k, x_{k+1}); the -I on
        # x_{k+1} is constant, A/B blocks are filled per iteration
        self._C = np.zeros((n * td, dim))
        rows = np.arange(n * td).reshape(n, td)
        self._C[rows.ravel(), self._xcols.ravel()] = -1.0
        self._Crows = rows

        rows_per_stage = ns + 1 + 2 * ud
        self.n_ineq = n * rows_per_stage
        self._G = np.zeros((self.n_ineq, dim))
        self._soft_rows_idx = (
            rows_per_stage * np.arange(n)[:, None] + np.arange(ns)[None, :]
        )
        self._zbound_rows = rows_per_stage * np.arange(n) + ns
        self._ubox_hi_idx = (
            rows_per_stage * np.arange(n)[:, None] + ns + 1 + np.arange(ud)[None, :]
        )
        self._ubox_lo_idx = self._ubox_hi_idx + ud
        # constant entries
        self._G[self._soft_rows_idx.ravel(), np.repeat(self._zcols, ns)] = -1.0
        self._G[self._zbound_rows, self._zcols] = -1.0
        self._G[self._ubox_hi_idx.ravel(), np.tile(self._ucols, (1, 1)).ravel()] = 1.0
        self._G[self._ubox_lo_idx.ravel(), self._ucols.ravel()] = -1.0

    # evaluators -------------------------------------------------------------
    def rollout_next(self, traj: Trajectory) -> np.ndarray:
        """Integrate every stage once: F(x_k, u_k), shape (N, 12)."""
        p = self.problem
        return integrate_packed(
            traj.states[:-1], traj.inputs, p.rig, p.world, self.dt, p.r_min
        )

    def gaps(self, traj: Trajectory) -> np.ndarray:
        """Shooting gaps F(x_k, u_k) [-] x_{k+1}, shape (N, 9)."""
        return state_boxminus(self.rollout_next(traj), traj.states[1:])

    def objective(self, traj: Trajectory) -> float:
        p = self.problem
        r = stage_residuals_packed(traj.states[:-1], traj.inputs, p)
        rt = terminal_residuals_packed(traj.states[-1], self.problem_terminal)
        z = traj.slacks
        return float(
            self.dt
            * (
                np.sum(r * r)
                + np.sum(rt * rt)
                + p.weights.w_z_l2 * z @ z
                + p.weights.w_z_l1 * np.sum(z)
            )
        )

    def soft_values(self, traj: Trajectory) -> np.ndarray:
        return soft_rows_packed(traj.states[:-1], traj.inputs, self.problem)

    def max_violation(self, traj: Trajectory) -> float:
        rows = self.soft_values(traj) - traj.slacks[:, None]
        return float(max(np.max(rows), 0.0))

    def merit(self, traj: Trajectory, mu: float) -> float:
        return self.objective(traj) + mu * float(np.sum(np.abs(self.gaps(traj))))

    def stats_batch(
        self, states: np.ndarray, inputs: np.ndarray, slacks: np.ndarray, mu: float
    ) -> list[TrajStats]:
        """Merit/objective/gap/violation for a family of candidates.

        states (B, N+1, 12), inputs (B, N, 4), slacks (B, N).
        """
        p = self.problem
        res, soft = stage_eval_packed(states[:, :-1], inputs, p)
        rt = terminal_residuals_packed(states[:, -1], self.problem_terminal)
        nxt = integrate_packed(
            states[:, :-1].reshape(-1, STATE_DIM),
            inputs.reshape(-1, INPUT_DIM),
            p.rig,
            p.world,
            self.dt,
            p.r_min,
        ).reshape(states.shape[0], -1, STATE_DIM)
        gaps = state_boxminus(nxt, states[:, 1:])
        obj = self.dt * (
            np.sum(res * res, axis=(-2, -1))
            + np.sum(rt * rt, axis=-1)
            + p.weights.w_z_l2 * np.sum(slacks * slacks, axis=-1)
            + p.weights.w_z_l1 * np.sum(slacks, axis=-1)
        )
        gap_l1 = np.sum(np.abs(gaps), axis=(-2, -1))
        gap_max = np.max(np.abs(gaps), axis=(-2, -1))
        viol = np.maximum(np.max(soft - slacks[..., None], axis=(-2, -1)), 0.0)
        return [
            TrajStats(
                merit=float(obj[i] + mu * gap_l1[i]),
                objective=float(obj[i]),
                max_gap=float(gap_max[i]),
                gap_l1=float(gap_l1[i]),
                max_violation=float(viol[i]),
            )
            for i in range(states.shape[0])
        ]

    def linearize(self, traj: Trajectory):
        """Forward-difference Jacobians of dynamics, residuals, and soft
        rows for the whole horizon in one batched sweep.

        Returns (gaps, A, B, res, Jrx, Jru, res_T, Jt, soft, Ssx, Ssu)
        with stage-major shapes.
        """
        p = self.problem
        n, h = self.n_steps, _FD_STEP
        nd = TANGENT_DIM + INPUT_DIM
        X, U = traj.states[:-1], traj.inputs

        # perturbed copies: axis 0 enumerates the 13 tangent directions
        Xp = np.empty((nd, n, STATE_DIM))
        Up = np.broadcast_to(U, (nd, n, INPUT_DIM)).copy()
        eye_x = np.eye(TANGENT_DIM) * h
        Xp[:TANGENT_DIM] = state_boxplus(X, eye_x[:, None, :])
        Xp[TANGENT_DIM:] = X
        for j in range(INPUT_DIM):
            Up[TANGENT_DIM + j, :, j] += h

        batch_x = np.concatenate([X[None], Xp], axis=0)
        batch_u = np.concatenate([U[None], Up], axis=0)
        nxt = integrate_packed(
            batch_x.reshape(-1, STATE_DIM),
            batch_u.reshape(-1, INPUT_DIM),
            p.rig,
            p.world,
            self.dt,
            p.r_min,
        ).reshape(nd + 1, n, STATE_DIM)
        gap_all = state_boxminus(nxt, traj.states[1:])
        gaps = gap_all[0]
        dyn_jac = (gap_all[1:] - gaps) / h  # (13, N, 9)
        A = np.moveaxis(dyn_jac[:TANGENT_DIM], 0, -1)  # (N, 9, 9)
        B = np.moveaxis(dyn_jac[TANGENT_DIM:], 0, -1)  # (N, 9, 4)

        res_all, soft_all = stage_eval_packed(batch_x, batch_u, p)
        res, soft = res_all[0], soft_all[0]
        res_jac = (res_all[1:] - res) / h
        Jrx = np.moveaxis(res_jac[:TANGENT_DIM], 0, -1)  # (N, 15, 9)
        Jru = np.moveaxis(res_jac[TANGENT_DIM:], 0, -1)  # (N, 15, 4)
        soft_jac = (soft_all[1:] - soft) / h
        Ssx = np.moveaxis(soft_jac[:TANGENT_DIM], 0, -1)  # (N, ns, 9)
        Ssu = np.moveaxis(soft_jac[TANGENT_DIM:], 0, -1)  # (N, ns, 4)

        xT = traj.states[-1]
        xT_p = state_boxplus(np.broadcast_to(xT, (TANGENT_DIM, STATE_DIM)), eye_x)
        res_T = terminal_residuals_packed(xT, self.problem_terminal)
        Jt = (
            (terminal_residuals_packed(xT_p, self.problem_terminal) - res_T) / h
        ).T  # (11, 9)

        return gaps, A, B, res, Jrx, Jru, res_T, Jt, soft, Ssx, Ssu


def transcribe(
    problem: OcpProblem,
    x_hat: ServoState,
    target_velocity: np.ndarray | None = None,
) -> TranscribedProblem:
    """Pin the problem to a measurement and prepare the NLP machinery.

    ``target_velocity`` feeds a target-motion estimate forward into the
    velocity reference and the stage-indexed position references.
    """
    return TranscribedProblem(problem, x_hat, target_velocity)


def initial_trajectory(problem: OcpProblem, x_hat: ServoState) -> Trajectory:
    """Cold start: roll the reference input out from the measurement.

    Shooting gaps are identically zero by construction; slacks start at
    whatever the soft rows require.
    """
    n = problem.horizon.n_steps
    lo, hi = problem.constraints.input_bounds()
    u = np.clip(problem.references.u_star, lo, hi)
    inputs = np.tile(u, (n, 1))
    states = np.empty((n + 1, STATE_DIM))
    states[0] = pack_state(x_hat)
    for k in range(n):
        states[k + 1] = integrate_packed(
            states[k], inputs[k], problem.rig, problem.world,
            problem.horizon.dt, problem.r_min,
        )
    traj = Trajectory(states, inputs, np.zeros(n))
    rows = soft_rows_packed(states[:-1], inputs, problem)
    traj.slacks = np.maximum(np.max(rows, axis=-1), 0.0)
    return traj


def shift_trajectory(
    traj: Trajectory, problem: OcpProblem, x_hat: ServoState
) -> Trajectory:
    """Receding-horizon warm start: drop stage 0, duplicate the last
    input, extend by one integrated state, re-pin x_0."""
    n = traj.n_steps
    states = np.empty_like(traj.states)
    states[0] = pack_state(x_hat)
    states[1:n] = traj.states[2:]
    inputs = np.vstack([traj.inputs[1:], traj.inputs[-1]])
    states[n] = integrate_packed(
        states[n - 1], inputs[n - 1], problem.rig, problem.world,
        problem.horizon.dt, problem.r_min,
    )
    slacks = np.concatenate([traj.slacks[1:], traj.slacks[-1:]])
    return Trajectory(states, inputs, slacks)


def _assemble_qp(nlp: TranscribedProblem, traj: Trajectory, lin):
    gaps, A, B, res, Jrx, Jru, res_T, Jt, soft, Ssx, Ssu = lin
    n, dt = nlp.n_steps, nlp.dt
    dim = nlp.dim
    w = nlp.problem.weights
    lo, hi = nlp.problem.constraints.input_bounds()
    xc, uc, zc = nlp._xcols, nlp._ucols, nlp._zcols

    H = np.zeros((dim, dim))
    g = np.zeros(dim)

    # Gauss-Newton blocks, stage residuals k = 1..N-1 couple (x_k, u_k);
    # stage 0 only contributes through u_0 since x_0 is pinned
    Hxx = 2 * dt * np.einsum("kri,krj->kij", Jrx[1:], Jrx[1:])
    Hxu = 2 * dt * np.einsum("kri,krj->kij", Jrx[1:], Jru[1:])
    Huu = 2 * dt * np.einsum("kri,krj->kij", Jru, Jru)
    gx = 2 * dt * np.einsum("kri,kr->ki", Jrx[1:], res[1:])
    gu = 2 * dt * np.einsum("kri,kr->ki", Jru, res)
    xkc = xc[:-1]  # columns of x_1..x_{N-1} (stage indices 1..N-1)
    H[xkc[:, :, None], xkc[:, None, :]] += Hxx
    H[xkc[:, :, None], uc[1:, None, :]] += Hxu
    H[uc[1:, :, None], xkc[:, None, :]] += np.swapaxes(Hxu, -1, -2)
    H[uc[:, :, None], uc[:, None, :]] += Huu
    np.add.at(g, xkc.ravel(), gx.ravel())
    np.add.at(g, uc.ravel(), gu.ravel())
    # terminal block on x_N
    H[xc[-1][:, None], xc[-1][None, :]] += 2 * dt * Jt.T @ Jt
    g[xc[-1]] += 2 * dt * Jt.T @ res_T
    # slack quadratic + L1
    H[zc, zc] += 2 * dt * w.w_z_l2
    g[zc] += dt * (2 * w.w_z_l2 * traj.slacks + w.w_z_l1)

    # shooting equalities: A dx_k + B du_k - dx_{k+1} = -gap_k
    C = nlp._C
    rows = nlp._Crows
    C[rows[1:, :, None], xc[:-1][:, None, :]] = A[1:]
    C[rows[:, :, None], uc[:, None, :]] = B
    b = -gaps.reshape(-1)

    # inequalities: soft rows, slack bounds, input box
    G = nlp._G
    h_vec = np.empty(nlp.n_ineq)
    G[nlp._soft_rows_idx[1:, :, None], xc[:-1][:, None, :]] = Ssx[1:]
    G[nlp._soft_rows_idx[:, :, None], uc[:, None, :]] = Ssu
    h_vec[nlp._soft_rows_idx] = traj.slacks[:, None] - soft
    h_vec[nlp._zbound_rows] = traj.slacks
    h_vec[nlp._ubox_hi_idx] = hi - traj.inputs
    h_vec[nlp._ubox_lo_idx] = traj.inputs - lo

    H[np.diag_indices_from(H)] += _DAMPING * (1.0 + np.max(np.abs(np.diag(H))))
    return H, g, C, b, G, h_vec


def _shooting_null_basis(nlp: TranscribedProblem, A: np.ndarray, B: np.ndarray):
    """Null-space basis of the shooting equalities by forward
    substitution: state tangents expressed in terms of the free
    (input, slack) variables.  Equivalent to the generic QR basis but
    two orders of magnitude cheaper at this structure."""
    n, td, ud = nlp.n_steps, TANGENT_DIM, INPUT_DIM
    n_free = n * (ud + 1)
    Z = np.zeros((nlp.dim, n_free))
    # free variables map to themselves
    Z[nlp._off_u :, :] = np.eye(n_free)
    # x_{k+1} = A_k x_k + B_k u_k (x_0 pinned at zero)
    M = np.zeros((td, n_free))
    for k in range(n):
        M = A[k] @ M if k > 0 else np.zeros((td, n_free))
        M[:, k * ud : (k + 1) * ud] += B[k]
        Z[nlp.ix(k + 1), :] = M
    return Z


def _feasible_start(nlp: TranscribedProblem, traj: Trajectory, lin) -> np.ndarray:
    """QP-feasible point: forward-substitute the linearized dynamics at
    du = 0, then lift the slack increments to cover the soft rows."""
    gaps, A, B, res, Jrx, Jru, res_T, Jt, soft, Ssx, Ssu = lin
    n = nlp.n_steps
    delta = np.zeros(nlp.dim)
    dx = np.zeros(TANGENT_DIM)
    for k in range(n):
        dx = (A[k] @ dx if k > 0 else np.zeros(TANGENT_DIM)) + gaps[k]
        delta[nlp.ix(k + 1)] = dx
    dxs = delta[: nlp._off_u].reshape(n, TANGENT_DIM)
    vals = soft.copy()
    vals[1:] += np.einsum("kri,ki->kr", Ssx[1:], dxs[:-1])
    need = np.max(vals, axis=-1) - traj.slacks
    delta[nlp._zcols] = np.maximum(need, 0.0)
    return delta


def sqp_step(
    nlp: TranscribedProblem,
    traj: Trajectory,
    merit_mu: float = 1e2,
    working0: list[int] | None = None,
) -> tuple[Trajectory, StepReport]:
    """One Gauss-Newton iteration: linearize, QP, merit line search.

    The merit function is the objective plus mu times the L1 norm of
    the shooting gaps; the step is rejected (alpha = 0) if no trial
    decreases it, so the merit sequence is non-increasing.
    """
    lin = nlp.linearize(traj)
    H, g, C, b, G, h_vec = _assemble_qp(nlp, traj, lin)
    x_start = _feasible_start(nlp, traj, lin)
    Z = _shooting_null_basis(nlp, lin[1], lin[2])
    sol = solve_qp(H, g, C, b, G, h_vec, x_start, working0,
                   basic_cols=nlp.basic_cols, null_basis=Z)
    if sol.status == "infeasible_start":
        raise SolverError("QP start infeasible: inconsistent transcription")

    # exact-penalty rule: the L1 gap weight must dominate the shooting
    # multipliers or the merit would reward violating the dynamics;
    # they come out of the QP stationarity by a backward recursion
    if _ADAPTIVE_MU:
        w_x = (H @ sol.x + g + G.T @ sol.lam_ineq)[: nlp._off_u].reshape(
            nlp.n_steps, TANGENT_DIM
        )
        A = lin[1]
        nu = w_x[-1]
        lam_max = float(np.max(np.abs(nu)))
        for k in range(nlp.n_steps - 1, 0, -1):
            nu = w_x[k - 1] + A[k].T @ nu
            lam_max = max(lam_max, float(np.max(np.abs(nu))))
        merit_mu = max(merit_mu, 2.0 * lam_max)

    dx, du, dz = nlp.split(sol.x)
    lo, hi = nlp.problem.constraints.input_bounds()
    step_norm = float(np.max(np.abs(sol.x), initial=0.0))
    cap = min(1.0, _TRUST_RADIUS / step_norm) if step_norm > 0 else 1.0
    alphas = tuple(a * cap for a in _ALPHAS)

    def candidates(aa):
        a = np.asarray(aa)
        sc = a[:, None, None]
        states = np.broadcast_to(traj.states, (len(a),) + traj.states.shape).copy()
        states[:, 1:] = state_boxplus(traj.states[1:], sc * dx)
        inputs = np.clip(traj.inputs + sc * du, lo, hi)
        slacks = np.maximum(traj.slacks + a[:, None] * dz, 0.0)
        return states, inputs, slacks

    # the full step is accepted most cycles once warm; probe (0, cap)
    # first and only sweep the backtracking grid when needed
    states, inputs, slacks = candidates(alphas[:2])
    stats = nlp.stats_batch(states, inputs, slacks, merit_mu)
    merit0 = stats[0].merit
    best, alpha_used, best_stats = traj, 0.0, stats[0]
    if stats[1].merit < merit0 - 1e-12:
        best = Trajectory(states[1], inputs[1], slacks[1])
        alpha_used, best_stats = alphas[1], stats[1]
    else:
        states, inputs, slacks = candidates(alphas[2:])
        stats_bt = nlp.stats_batch(states, inputs, slacks, merit_mu)
        for i, alpha in enumerate(alphas[2:]):
            if stats_bt[i].merit < merit0 - 1e-12:
                best = Trajectory(states[i], inputs[i], slacks[i])
                alpha_used, best_stats = alpha, stats_bt[i]
                break
    return best, StepReport(
        alpha=alpha_used,
        step_norm=step_norm,
        merit_before=merit0,
        merit_after=best_stats.merit,
        qp_status=sol.status,
        qp_iterations=sol.iterations,
        active_set=sol.active_set,
        stats=best_stats,
    )


def solve_receding(
    problem: OcpProblem,
    x_hat: ServoState,
    warm: Trajectory | None = None,
    iterations: int = 3,
    merit_mu: float = 1e2,
    working0: list[int] | None = None,
    step_exit_tol: float = 1e-6,
    target_velocity: np.ndarray | None = None,
) -> tuple[ControlInput, Trajectory, SolveReport]:
    """Bounded-iteration solve from a fresh measurement.

    Warm trajectories are shifted by one stage and re-pinned to the
    measurement; without one, the reference-input rollout seeds the
    iteration.  Iteration stops early once the QP step is negligible
    (further iterations would re-derive the same fixed point).
    Deterministic: identical inputs give identical outputs (wall time
    aside).
    """
    t_start = time.perf_counter()
    nlp = transcribe(problem, x_hat, target_velocity)
    if warm is not None and warm.n_steps == problem.horizon.n_steps:
        traj = shift_trajectory(warm, nlp.problem, x_hat)
    else:
        traj = initial_trajectory(nlp.problem, x_hat)

    qp_status = "optimal"
    active = working0
    rep = None
    n_done = 0
    for _ in range(iterations):
        traj, rep = sqp_step(nlp, traj, merit_mu, active)
        qp_status = rep.qp_status
        active = rep.active_set
        n_done += 1
        if rep.step_norm < step_exit_tol:
            break

    lo, hi = problem.constraints.input_bounds()
    u0 = np.clip(traj.inputs[0], lo, hi)
    stats = rep.stats
    report = SolveReport(
        iterations=n_done,
        qp_status=qp_status,
        max_gap=stats.max_gap,
        max_violation=stats.max_violation,
        objective=stats.objective,
        wall_ms=(time.perf_counter() - t_start) * 1e3,
        active_set=active or [],
    )
    return unpack_input(u0), traj, report


class ControlBuffer:
    """Horizon of timestamped inputs from the last successful solve.

    One producer (the solver) replaces the whole buffer per cycle; one
    consumer reads by query time.  A lock serializes replacement
    against reads so a half-written horizon can never be observed.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._inputs: np.ndarray | None = None
        self._t0 = 0.0
        self._dt = 0.05

    def buffer_controls(self, traj: Trajectory, t0: float, dt: float) -> None:
        with self._lock:
            self._inputs = traj.inputs.copy()
            self._t0 = float(t0)
            self._dt = float(dt)

    @property
    def timestamps(self) -> np.ndarray:
        with self._lock:
            if self._inputs is None:
                return np.zeros(0)
            return self._t0 + self._dt * np.arange(self._inputs.shape[0])

    def next_control(self, t: float) -> tuple[ControlInput, bool]:
        """Input whose timestamp covers t, plus an outage flag set when
        the buffered horizon is exhausted (last input is then held)."""
        with self._lock:
            if self._inputs is None:
                raise SolverError("control buffer is empty")
            idx = int(np.floor((t - self._t0) / self._dt + 1e-9))
            idx = max(idx, 0)
            if idx >= self._inputs.shape[0]:
                return unpack_input(self._inputs[-1]), True
            return unpack_input(self._inputs[idx]), False


class RecedingController:
    """Stateful convenience wrapper: warm start + control buffer.

    update() on a fresh measurement; fallback() to replay the buffered
    plan while detections are missing.
    """

    def __init__(
        self,
        problem: OcpProblem,
        sqp_iterations: int = 3,
        cold_iterations: int = 10,
    ):
        self.problem = problem
        self.sqp_iterations = sqp_iterations
        # first cycle has no warm start; extra iterations there seed the
        # receding horizon with a sensible plan instead of a raw rollout
        self.cold_iterations = max(cold_iterations, sqp_iterations)
        self.buffer = ControlBuffer()
        self._warm: Trajectory | None = None
        self._active: list[int] = []

    def update(self, t: float, x_hat: ServoState, target_velocity=None):
        iters = self.sqp_iterations if self._warm is not None else self.cold_iterations
        u0, traj, report = solve_receding(
            self.problem, x_hat, self._warm, iters,
            working0=self._active, target_velocity=target_velocity,
        )
        self._warm = traj
        self._active = report.active_set
        self.buffer.buffer_controls(traj, t, self.problem.horizon.dt)
        return u0, traj, report

    def fallback(self, t: float) -> tuple[ControlInput, bool]:
        return self.buffer.next_control(t)
