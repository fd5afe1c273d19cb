"""Closed-loop plant, emulated detector, scenario runner, and metrics.

The plant is a rigid body driven by mass-normalized thrust with a
body-rate inner loop (first-order lag plus a slow integral correction)
standing in for a rotor-level model; physics run at a fixed fine step
(1 kHz by default) between control updates.  The detector is emulated
as a noisy projection oracle: the target point is projected through the
pinhole model, perturbed in pixel space, and wrapped in a synthetic
bounding box whose size matches the target diameter at the true depth,
so the bbox-based range estimator sees realistic data.  Dropouts
(scripted cycles or Bernoulli) exercise the control buffer.

Everything is deterministic for a fixed seed: one RNG drives the cycle
ordering of dropout and noise draws, physics are fixed-step, and the
solver contains no randomness.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import manifold as mf
from .camera import BoundingBox, PinholeIntrinsics, range_from_bbox
from .dynamics import (
    ControlInput,
    RigExtrinsics,
    ServoState,
    WorldConstants,
)
from .ocp import OcpProblem
from .solver import RecedingController, SolveReport, SolverError


@dataclass(eq=False)
class PlantParams:
    rate_tau: float = 0.03  # body-rate lag [s]
    rate_ki: float = 2.0  # integral correction on the rate error
    c_max: float = 25.0  # thrust the airframe can physically deliver


@dataclass(eq=False)
class PlantState:
    p_w: np.ndarray
    v_w: np.ndarray
    q_wb: np.ndarray
    omega_b: np.ndarray
    rate_int: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.p_w = np.asarray(self.p_w, dtype=float)
        self.v_w = np.asarray(self.v_w, dtype=float)
        self.q_wb = mf.quat_normalize(self.q_wb)
        self.omega_b = np.asarray(self.omega_b, dtype=float)
        self.rate_int = np.asarray(self.rate_int, dtype=float)

    def copy(self) -> "PlantState":
        return PlantState(
            self.p_w.copy(), self.v_w.copy(), self.q_wb.copy(),
            self.omega_b.copy(), self.rate_int.copy(),
        )


def step_plant(
    s: PlantState,
    cmd: ControlInput,
    dt: float,
    params: PlantParams | None = None,
    world: WorldConstants | None = None,
) -> PlantState:
    """One fine physics step (dt <= 1 ms) under a held command.

    Rigid-body translation under rotated thrust plus gravity; commanded
    body rates tracked through a first-order lag with an integral
    residual term.  RK4 with the attitude integrated as a local
    rotation-vector chart.
    """
    if dt > 1e-3 + 1e-12:
        raise ValueError("physics step must be at most 1 ms")
    params = params or PlantParams()
    world = world or WorldConstants()
    c = min(max(cmd.c, 0.0), params.c_max)
    om_cmd = cmd.omega_b

    q0 = s.q_wb

    def deriv(y):
        # y = [p(3), v(3), phi(3), omega(3), rate_int(3)]
        v = y[3:6]
        phi = y[6:9]
        om = y[9:12]
        ei = y[12:15]
        q = mf.quat_mul(q0, mf.quat_exp(phi))
        v_dot = mf.rotate(q, np.array([0.0, 0.0, c])) + world.g_w
        phi_dot = mf.so3_right_jacobian_inv(phi) @ om
        err = om_cmd - om
        om_dot = err / params.rate_tau + params.rate_ki * ei
        return np.concatenate([v, v_dot, phi_dot, om_dot, err])

    y0 = np.concatenate([s.p_w, s.v_w, np.zeros(3), s.omega_b, s.rate_int])
    k1 = deriv(y0)
    k2 = deriv(y0 + 0.5 * dt * k1)
    k3 = deriv(y0 + 0.5 * dt * k2)
    k4 = deriv(y0 + dt * k3)
    y1 = y0 + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return PlantState(
        p_w=y1[0:3],
        v_w=y1[3:6],
        q_wb=mf.quat_mul(q0, mf.quat_exp(y1[6:9])),
        omega_b=y1[9:12],
        rate_int=y1[12:15],
    )


@dataclass(eq=False)
class TargetTrack:
    """Scripted target motion.

    kinds: "stationary" (fixed point), "s_curve" (constant forward
    speed with sinusoidal lateral sweep and a smooth tanh speed ramp so
    motion starts from rest), "waypoints" (Catmull-Rom through timed
    waypoints).
    """

    kind: str = "stationary"
    position: np.ndarray = field(default_factory=lambda: np.array([20.0, 0.0, 1.0]))
    v_forward: float = 4.9
    amplitude: float = 2.0
    wavelength: float = 18.0
    ramp_tau: float = 1.5
    waypoint_times: np.ndarray | None = None
    waypoints: np.ndarray | None = None

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        if self.kind not in ("stationary", "s_curve", "waypoints"):
            raise ValueError(f"unknown target kind {self.kind!r}")
        if self.kind == "waypoints":
            self.waypoint_times = np.asarray(self.waypoint_times, dtype=float)
            self.waypoints = np.asarray(self.waypoints, dtype=float)

    @property
    def peak_speed(self) -> float:
        if self.kind != "s_curve":
            return 0.0
        return self.v_forward * float(
            np.sqrt(1.0 + (2 * np.pi * self.amplitude / self.wavelength) ** 2)
        )


def target_position(track: TargetTrack, t: float) -> np.ndarray:
    """Target position at time t >= 0; continuous and differentiable,
    with speed bounded by the track's peak speed."""
    if track.kind == "stationary":
        return track.position.copy()
    if track.kind == "s_curve":
        # arc parameter with smooth ramp-in: sigma' = tanh(t / tau)
        tau = track.ramp_tau
        sigma = tau * float(np.log(np.cosh(t / tau)))
        x = track.v_forward * sigma
        y = track.amplitude * np.sin(2 * np.pi * track.v_forward * sigma
                                     / track.wavelength)
        return track.position + np.array([x, y, 0.0])
    # Catmull-Rom through timed waypoints, clamped at the ends
    tt, pp = track.waypoint_times, track.waypoints
    t = float(np.clip(t, tt[0], tt[-1]))
    i = int(np.clip(np.searchsorted(tt, t) - 1, 0, len(tt) - 2))
    h = tt[i + 1] - tt[i]
    s = (t - tt[i]) / h
    p0 = pp[max(i - 1, 0)]
    p1, p2 = pp[i], pp[i + 1]
    p3 = pp[min(i + 2, len(pp) - 1)]
    m1 = (p2 - p0) / 2
    m2 = (p3 - p1) / 2
    s2, s3 = s * s, s * s * s
    return (
        (2 * s3 - 3 * s2 + 1) * p1
        + (s3 - 2 * s2 + s) * m1
        + (-2 * s3 + 3 * s2) * p2
        + (s3 - s2) * m2
    )


@dataclass(eq=False)
class DetectionNoise:
    pixel_std: float = 1.0
    bbox_frac: float = 0.02
    dropout_prob: float = 0.0
    dropout_cycles: tuple[int, ...] = ()
    perfect_range: bool = False


@dataclass(eq=False)
class DetectionEvent:
    timestamp: float
    rho: np.ndarray | None  # unit bearing in the camera frame
    bbox: BoundingBox | None
    valid: bool
    in_fov: bool  # ground truth: target projects inside the frame
    pixel: tuple[float, float] | None


def observe(
    s: PlantState,
    target_w: np.ndarray,
    intr: PinholeIntrinsics,
    rig: RigExtrinsics,
    d_gate: float,
    noise: DetectionNoise,
    rng: np.random.Generator,
    t: float = 0.0,
    dropout: bool = False,
) -> DetectionEvent:
    """Emulated detector: project the target, add pixel noise, build a
    synthetic bounding box sized for the target diameter at its depth."""
    p_cam = s.p_w + mf.rotate(s.q_wb, rig.p_cb_b)
    q_wc = mf.quat_mul(s.q_wb, rig.q_bc)
    d_c = mf.rotate(mf.quat_conj(q_wc), target_w - p_cam)
    if d_c[2] <= 1e-3:
        return DetectionEvent(t, None, None, False, False, None)
    u = intr.fx * d_c[0] / d_c[2] + intr.cx
    v = intr.fy * d_c[1] / d_c[2] + intr.cy
    in_fov = bool(0.0 <= u <= intr.width and 0.0 <= v <= intr.height)
    if not in_fov or dropout:
        return DetectionEvent(t, None, None, False, in_fov, (u, v))

    u_n = u + noise.pixel_std * rng.standard_normal()
    v_n = v + noise.pixel_std * rng.standard_normal()
    size = intr.fx * d_gate / d_c[2]
    size_n = size * (1.0 + noise.bbox_frac * rng.standard_normal())
    rho = np.linalg.solve(intr.matrix, np.array([u_n, v_n, 1.0]))
    rho = rho / np.linalg.norm(rho)
    bbox = BoundingBox(u_n, v_n, max(size_n, 1.0), max(size_n, 1.0))
    return DetectionEvent(t, rho, bbox, True, True, (u, v))


LOG_COLUMNS = (
    "t", "p_x", "p_y", "p_z", "v_x", "v_y", "v_z",
    "qw", "qx", "qy", "qz", "roll_deg", "pitch_deg", "speed",
    "u_px", "v_px", "in_fov", "r_true", "r_meas",
    "closing_rate", "ttc", "thrust", "wx", "wy", "wz",
    "slack_max", "solve_ms", "detection_valid",
)

LOG_UNITS = (
    "s", "m", "m", "m", "m/s", "m/s", "m/s",
    "-", "-", "-", "-", "deg", "deg", "m/s",
    "px", "px", "0/1", "m", "m",
    "m/s", "s", "m/s^2", "rad/s", "rad/s", "rad/s",
    "-", "ms", "0/1",
)


@dataclass(eq=False)
class ScenarioLog:
    """Per-control-cycle record of plant truth, observation, solver
    output, and timing.  Columns are fixed; see LOG_COLUMNS."""

    data: np.ndarray  # (n_cycles, len(LOG_COLUMNS))
    aborted: bool = False

    @property
    def n_cycles(self) -> int:
        return self.data.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.data[:, LOG_COLUMNS.index(name)]

    def to_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("# units: " + ",".join(LOG_UNITS) + "\n")
            f.write(",".join(LOG_COLUMNS) + "\n")
            for row in self.data:
                f.write(",".join(repr(float(v)) for v in row) + "\n")

    @classmethod
    def from_csv(cls, path) -> "ScenarioLog":
        rows = []
        with open(path) as f:
            header = None
            for line in f:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if header is None:
                    header = tuple(line.split(","))
                    if header != LOG_COLUMNS:
                        raise ValueError("log header does not match schema")
                    continue
                rows.append([float(v) for v in line.split(",")])
        data = np.asarray(rows, dtype=float).reshape(len(rows), len(LOG_COLUMNS))
        return cls(data=data)


@dataclass
class ScenarioMetrics:
    overshoot_m: float
    max_roll_deg: float
    max_pitch_deg: float
    max_speed: float
    fov_violation_cycles: int
    steady_state_range_error_m: float
    median_solve_ms: float
    detection_valid_fraction: float

    def summary(self) -> str:
        lines = [
            f"overshoot_m: {self.overshoot_m:.4f}",
            f"max_roll_deg: {self.max_roll_deg:.2f}",
            f"max_pitch_deg: {self.max_pitch_deg:.2f}",
            f"max_speed: {self.max_speed:.3f}",
            f"fov_violation_cycles: {self.fov_violation_cycles}",
            f"steady_state_range_error_m: {self.steady_state_range_error_m:.4f}",
            f"median_solve_ms: {self.median_solve_ms:.2f}",
            f"detection_valid_fraction: {self.detection_valid_fraction:.4f}",
        ]
        return "\n".join(lines) + "\n"


def metrics(
    log: ScenarioLog,
    r_star: float,
    target_start: np.ndarray | None = None,
    start: np.ndarray | None = None,
    settle_window_s: float = 1.0,
) -> ScenarioMetrics:
    """Summary numbers for a finished run.

    Overshoot is the worst penetration past the stand-off point along
    the approach axis (from the start position toward the initial
    target position); steady-state range error is the worst |r - r*|
    over the trailing window.
    """
    if log.n_cycles == 0:
        raise ValueError("empty log")
    p = np.stack([log.column("p_x"), log.column("p_y"), log.column("p_z")], axis=1)
    if start is None:
        start = p[0]
    if target_start is None:
        target_start = start + np.array([1.0, 0.0, 0.0])
    axis = np.asarray(target_start, dtype=float) - np.asarray(start, dtype=float)
    axis = axis / np.linalg.norm(axis)
    standoff = np.asarray(target_start, dtype=float) - r_star * axis
    penetration = (p - standoff) @ axis
    overshoot = float(max(np.max(penetration), 0.0))

    t = log.column("t")
    tail = t >= (t[-1] - settle_window_s)
    r_err = np.abs(log.column("r_true") - r_star)
    return ScenarioMetrics(
        overshoot_m=overshoot,
        max_roll_deg=float(np.max(np.abs(log.column("roll_deg")))),
        max_pitch_deg=float(np.max(np.abs(log.column("pitch_deg")))),
        max_speed=float(np.max(log.column("speed"))),
        fov_violation_cycles=int(np.sum(log.column("in_fov") == 0.0)),
        steady_state_range_error_m=float(np.max(r_err[tail])),
        median_solve_ms=float(np.median(log.column("solve_ms"))),
        detection_valid_fraction=float(np.mean(log.column("detection_valid"))),
    )


@dataclass(eq=False)
class SimSetup:
    """Everything run_scenario needs besides the OCP problem."""

    problem: OcpProblem
    intrinsics: PinholeIntrinsics
    track: TargetTrack
    d_gate: float = 0.75
    plant: PlantParams = field(default_factory=PlantParams)
    noise: DetectionNoise = field(default_factory=DetectionNoise)
    start_p: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    start_v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    start_q_wb: np.ndarray = field(default_factory=lambda: np.array([1.0, 0, 0, 0]))
    duration: float = 15.0
    physics_dt: float = 1e-3
    seed: int = 0
    sqp_iterations: int = 3
    # estimate the target's velocity from successive detections and
    # feed it forward as the velocity reference; needed to track a
    # moving target without a standing lag
    velocity_feedforward: bool = False
    feedforward_window_s: float = 0.5


def run_scenario(setup: SimSetup) -> ScenarioLog:
    """Fixed-step co-simulation: physics at the fine step, control at
    the horizon period, measurements from the emulated detector.

    The controller sees velocity and attitude from the plant (treated
    as measurable), the feature from the detection, and range from the
    synthetic bounding box (or ground truth in perfect-range mode).
    Missing detections replay the buffered plan.  A solver failure
    aborts with the partial log.
    """
    prob = setup.problem
    dt_ctl = prob.horizon.dt
    n_cycles = int(round(setup.duration / dt_ctl))
    n_sub = max(int(round(dt_ctl / setup.physics_dt)), 1)
    dt_phys = dt_ctl / n_sub

    rng = np.random.default_rng(setup.seed)
    plant = PlantState(setup.start_p, setup.start_v, setup.start_q_wb, np.zeros(3))
    controller = RecedingController(prob, setup.sqp_iterations)
    world = prob.world

    rows = np.zeros((n_cycles, len(LOG_COLUMNS)))
    aborted = False
    u_cmd = ControlInput(9.81, np.zeros(3))
    have_plan = False
    track_history: list[tuple[float, np.ndarray]] = []

    def estimate_target_velocity() -> np.ndarray | None:
        """Least-squares slope of measured target positions over the
        trailing window; None until two samples exist."""
        if len(track_history) < 3:
            return None
        ts = np.array([h[0] for h in track_history])
        ps = np.stack([h[1] for h in track_history])
        ts = ts - ts[-1]
        denom = float(np.sum(ts * ts))
        if denom < 1e-12:
            return None
        return (ts - ts.mean()) @ (ps - ps.mean(axis=0)) / (
            denom - len(ts) * ts.mean() ** 2
        )

    for i in range(n_cycles):
        t = i * dt_ctl
        target_w = target_position(setup.track, t)
        dropout = (i in setup.noise.dropout_cycles) or (
            setup.noise.dropout_prob > 0.0
            and rng.random() < setup.noise.dropout_prob
        )
        det = observe(
            plant, target_w, setup.intrinsics, prob.rig, setup.d_gate,
            setup.noise, rng, t, dropout,
        )

        solve_ms = 0.0
        slack_max = 0.0
        if det.valid:
            if setup.noise.perfect_range:
                p_cam = plant.p_w + mf.rotate(plant.q_wb, prob.rig.p_cb_b)
                r_meas = float(np.linalg.norm(target_w - p_cam))
            else:
                r_meas = range_from_bbox(det.bbox, setup.intrinsics, setup.d_gate)
            r_meas = max(r_meas, prob.r_min)
            x_hat = ServoState(
                v_w=plant.v_w, q_wb=plant.q_wb,
                q=mf.from_bearing(det.rho), r=r_meas,
            )
            v_target_est = None
            if setup.velocity_feedforward:
                p_cam_m = plant.p_w + mf.rotate(plant.q_wb, prob.rig.p_cb_b)
                q_wc = mf.quat_mul(plant.q_wb, prob.rig.q_bc)
                p_t_meas = p_cam_m + mf.rotate(q_wc, det.rho * r_meas)
                track_history.append((t, p_t_meas))
                cutoff = t - setup.feedforward_window_s
                while track_history and track_history[0][0] < cutoff:
                    track_history.pop(0)
                v_target_est = estimate_target_velocity()
            try:
                u_cmd, _, report = controller.update(
                    t, x_hat, target_velocity=v_target_est
                )
            except SolverError:
                aborted = True
                rows = rows[:i]
                break
            solve_ms = report.wall_ms
            slack_max = report.max_violation
            have_plan = True
        elif have_plan:
            u_cmd, _ = controller.fallback(t)
            r_meas = float("nan")
        else:
            r_meas = float("nan")  # no detection yet: hold hover

        # ground-truth bookkeeping for the log
        p_cam = plant.p_w + mf.rotate(plant.q_wb, prob.rig.p_cb_b)
        rel = target_w - p_cam
        r_true = float(np.linalg.norm(rel))
        v_target = (
            target_position(setup.track, t + 1e-4)
            - target_position(setup.track, t - 1e-4)
        ) / 2e-4 if t > 0 else np.zeros(3)
        v_cam = plant.v_w + mf.rotate(
            plant.q_wb, mf.cross3(plant.omega_b, prob.rig.p_cb_b)
        )
        closing = float(-(rel / r_true) @ (v_target - v_cam)) if r_true > 0 else 0.0
        ttc = r_true / closing if closing > 1e-9 else float("inf")
        roll, pitch, _ = mf.euler_zyx(plant.q_wb)
        px = det.pixel if det.pixel is not None else (float("nan"), float("nan"))
        rows[i] = [
            t, *plant.p_w, *plant.v_w, *plant.q_wb,
            float(np.degrees(roll)), float(np.degrees(pitch)),
            float(np.linalg.norm(plant.v_w)),
            px[0], px[1], float(det.in_fov), r_true,
            r_meas, closing, ttc, u_cmd.c, *u_cmd.omega_b,
            slack_max, solve_ms, float(det.valid),
        ]

        for _ in range(n_sub):
            plant = step_plant(plant, u_cmd, dt_phys, setup.plant, world)

    return ScenarioLog(data=rows, aborted=aborted)
