"""Declarative scenario configuration: schema, validation, overrides.

One YAML-syntax file describes a complete closed-loop experiment:
camera, rig, target track, objective weights, references, constraints,
horizon, noise, and simulation bookkeeping.  Parsing is strict -- every
field is checked for type and sign, cross-field constraints (image
bound inside the frame, consistent actuation box) included -- so a bad
file fails loudly before anything runs.  Dotted-path overrides
("ocp.weights.q_u=3") patch single values from the command line.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .camera import ImageBound, PinholeIntrinsics
from .dynamics import RigExtrinsics, WorldConstants
from .ocp import (
    ConstraintMode,
    ConstraintSet,
    Horizon,
    OcpProblem,
    OcpReferences,
    OcpWeights,
)
from .simulator import DetectionNoise, PlantParams, SimSetup, TargetTrack


class ConfigError(ValueError):
    """Schema violation with the offending dotted path."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


def _need(d: dict, path: str, key: str, default=None, required=False):
    if key in d:
        return d[key]
    if required:
        raise ConfigError(f"{path}.{key}", "missing required field")
    return default


def _num(d, path, key, default=None, required=False, positive=False):
    v = _need(d, path, key, default, required)
    if v is None:
        return None
    if not isinstance(v, (int, float)) or isinstance(v, bool):
        raise ConfigError(f"{path}.{key}", f"expected a number, got {v!r}")
    if positive and v <= 0:
        raise ConfigError(f"{path}.{key}", f"must be positive, got {v}")
    return float(v)


def _vec(d, path, key, n, default=None, required=False):
    v = _need(d, path, key, default, required)
    if v is None:
        return None
    try:
        arr = np.asarray(v, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"{path}.{key}", f"expected a list of numbers, got {v!r}")
    if arr.shape != (n,):
        raise ConfigError(f"{path}.{key}", f"expected {n} numbers, got shape {arr.shape}")
    return arr


@dataclass(eq=False)
class ScenarioConfig:
    """Validated, fully materialized scenario description."""

    name: str
    intrinsics: PinholeIntrinsics
    bound: ImageBound
    rig: RigExtrinsics
    track: TargetTrack
    d_gate: float
    weights: OcpWeights
    references: OcpReferences
    t_c_min: float
    c_min: float
    c_max: float
    omega_max: np.ndarray
    constraint_mode: ConstraintMode
    horizon: Horizon
    plant: PlantParams
    noise: DetectionNoise
    start_p: np.ndarray
    start_v: np.ndarray
    start_q_wb: np.ndarray
    duration: float
    physics_dt: float
    seed: int
    sqp_iterations: int
    velocity_feedforward: bool
    feedforward_window_s: float
    out_dir: str
    raw: dict = field(repr=False, default_factory=dict)

    def build_problem(self) -> OcpProblem:
        return OcpProblem(
            horizon=self.horizon,
            weights=self.weights,
            references=self.references,
            constraints=ConstraintSet(
                bound=self.bound,
                t_c_min=self.t_c_min,
                c_min=self.c_min,
                c_max=self.c_max,
                omega_max=self.omega_max,
                mode=self.constraint_mode,
            ),
            rig=self.rig,
            world=WorldConstants(),
        )

    def build_setup(self) -> SimSetup:
        return SimSetup(
            problem=self.build_problem(),
            intrinsics=self.intrinsics,
            track=self.track,
            d_gate=self.d_gate,
            plant=self.plant,
            noise=self.noise,
            start_p=self.start_p,
            start_v=self.start_v,
            start_q_wb=self.start_q_wb,
            duration=self.duration,
            physics_dt=self.physics_dt,
            seed=self.seed,
            sqp_iterations=self.sqp_iterations,
            velocity_feedforward=self.velocity_feedforward,
            feedforward_window_s=self.feedforward_window_s,
        )

    def to_dict(self) -> dict:
        """Plain-data form; parse(to_dict()) reproduces this config."""
        return {
            "name": self.name,
            "camera": {
                "fx": self.intrinsics.fx, "fy": self.intrinsics.fy,
                "cx": self.intrinsics.cx, "cy": self.intrinsics.cy,
                "width": self.intrinsics.width, "height": self.intrinsics.height,
                "bound_w_px": 2 * self.bound.half_width_n * self.intrinsics.fx,
                "bound_h_px": 2 * self.bound.half_height_n * self.intrinsics.fy,
            },
            "rig": {
                "p_cb_b": list(self.rig.p_cb_b),
                "q_bc": list(self.rig.q_bc),
            },
            "target": {
                "kind": self.track.kind,
                "position": list(self.track.position),
                "v_forward": self.track.v_forward,
                "amplitude": self.track.amplitude,
                "wavelength": self.track.wavelength,
                "ramp_tau": self.track.ramp_tau,
                "d_gate": self.d_gate,
            },
            "ocp": {
                "weights": {
                    "q_p": list(self.weights.q_p),
                    "q_v": list(self.weights.q_v),
                    "q_att": list(self.weights.q_att),
                    "r_u": list(self.weights.r_u),
                    "q_u": self.weights.q_u,
                    "w_z_l1": self.weights.w_z_l1,
                    "w_z_l2": self.weights.w_z_l2,
                },
                "references": {
                    "rho_star": list(self.references.rho_star),
                    "r_star": self.references.r_star,
                    "v_star": list(self.references.v_star),
                    "q_wb_star": list(self.references.q_wb_star),
                    "u_star": list(self.references.u_star),
                    "error_clip": self.references.error_clip,
                },
                "constraints": {
                    "mode": self.constraint_mode.value,
                    "t_c_min": self.t_c_min,
                    "c_min": self.c_min,
                    "c_max": self.c_max,
                    "omega_max": list(self.omega_max),
                },
                "horizon": {"steps": self.horizon.n_steps, "dt": self.horizon.dt},
            },
            "plant": {
                "rate_tau": self.plant.rate_tau,
                "rate_ki": self.plant.rate_ki,
                "c_max": self.plant.c_max,
                "start_p": list(self.start_p),
                "start_v": list(self.start_v),
                "start_q_wb": list(self.start_q_wb),
            },
            "noise": {
                "pixel_std": self.noise.pixel_std,
                "bbox_frac": self.noise.bbox_frac,
                "dropout_prob": self.noise.dropout_prob,
                "dropout_cycles": list(self.noise.dropout_cycles),
                "perfect_range": self.noise.perfect_range,
            },
            "sim": {
                "duration": self.duration,
                "physics_dt": self.physics_dt,
                "seed": self.seed,
                "sqp_iterations": self.sqp_iterations,
                "velocity_feedforward": self.velocity_feedforward,
                "feedforward_window_s": self.feedforward_window_s,
                "out": self.out_dir,
            },
        }


def parse(data: dict, name: str = "scenario") -> ScenarioConfig:
    """Validate a plain dict into a ScenarioConfig, raising ConfigError
    with the offending dotted path on any violation."""
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a mapping")

    cam = _need(data, "<root>", "camera", {}, required=True)
    fx = _num(cam, "camera", "fx", required=True, positive=True)
    fy = _num(cam, "camera", "fy", required=True, positive=True)
    cx = _num(cam, "camera", "cx", required=True)
    cy = _num(cam, "camera", "cy", required=True)
    width = _num(cam, "camera", "width", required=True, positive=True)
    height = _num(cam, "camera", "height", required=True, positive=True)
    try:
        intr = PinholeIntrinsics(fx, fy, cx, cy, int(width), int(height))
    except ValueError as e:
        raise ConfigError("camera", str(e))
    bw = _num(cam, "camera", "bound_w_px", required=True, positive=True)
    bh = _num(cam, "camera", "bound_h_px", required=True, positive=True)
    try:
        bound = ImageBound.from_pixels(bw, bh, intr)
    except ValueError as e:
        raise ConfigError("camera.bound_w_px", str(e))

    rig_d = _need(data, "<root>", "rig", {}, required=True)
    rig = RigExtrinsics(
        p_cb_b=_vec(rig_d, "rig", "p_cb_b", 3, required=True),
        q_bc=_vec(rig_d, "rig", "q_bc", 4, required=True),
    )

    tgt = _need(data, "<root>", "target", {}, required=True)
    kind = _need(tgt, "target", "kind", "stationary")
    try:
        track = TargetTrack(
            kind=kind,
            position=_vec(tgt, "target", "position", 3, [20.0, 0.0, 1.0]),
            v_forward=_num(tgt, "target", "v_forward", 4.9),
            amplitude=_num(tgt, "target", "amplitude", 2.0),
            wavelength=_num(tgt, "target", "wavelength", 18.0, positive=True),
            ramp_tau=_num(tgt, "target", "ramp_tau", 1.5, positive=True),
        )
    except ValueError as e:
        raise ConfigError("target.kind", str(e))
    d_gate = _num(tgt, "target", "d_gate", 0.75, positive=True)

    ocp = _need(data, "<root>", "ocp", {}, required=True)
    wd = _need(ocp, "ocp", "weights", {}, required=True)
    try:
        weights = OcpWeights(
            q_p=_vec(wd, "ocp.weights", "q_p", 3, required=True),
            q_v=_vec(wd, "ocp.weights", "q_v", 3, required=True),
            q_att=_vec(wd, "ocp.weights", "q_att", 4, required=True),
            r_u=_vec(wd, "ocp.weights", "r_u", 4, required=True),
            q_u=_num(wd, "ocp.weights", "q_u", required=True),
            w_z_l1=_num(wd, "ocp.weights", "w_z_l1", required=True),
            w_z_l2=_num(wd, "ocp.weights", "w_z_l2", required=True),
        )
    except ValueError as e:
        raise ConfigError("ocp.weights", str(e))

    rd = _need(ocp, "ocp", "references", {}, required=True)
    try:
        references = OcpReferences(
            rho_star=_vec(rd, "ocp.references", "rho_star", 3, [0.0, 0.0, 1.0]),
            r_star=_num(rd, "ocp.references", "r_star", required=True, positive=True),
            v_star=_vec(rd, "ocp.references", "v_star", 3, [0.0, 0.0, 0.0]),
            q_wb_star=_vec(rd, "ocp.references", "q_wb_star", 4, [1.0, 0, 0, 0]),
            u_star=_vec(rd, "ocp.references", "u_star", 4, [9.81, 0, 0, 0]),
            error_clip=_num(rd, "ocp.references", "error_clip", None, positive=True),
        )
    except ValueError as e:
        raise ConfigError("ocp.references", str(e))

    cd = _need(ocp, "ocp", "constraints", {}, required=True)
    mode_s = _need(cd, "ocp.constraints", "mode", "ttc")
    try:
        mode = ConstraintMode(mode_s)
    except ValueError:
        raise ConfigError("ocp.constraints.mode",
                          f"must be one of ttc/distance/none, got {mode_s!r}")
    t_c_min = _num(cd, "ocp.constraints", "t_c_min", 2.0, positive=True)
    c_min = _num(cd, "ocp.constraints", "c_min", 2.0)
    c_max = _num(cd, "ocp.constraints", "c_max", 20.0)
    if c_min >= c_max:
        raise ConfigError("ocp.constraints.c_min", "need c_min < c_max")
    omega_max = _vec(cd, "ocp.constraints", "omega_max", 3, [2.0, 2.5, 1.5])
    if np.any(omega_max <= 0):
        raise ConfigError("ocp.constraints.omega_max", "must be positive")

    hd = _need(ocp, "ocp", "horizon", {}, required=True)
    steps = _num(hd, "ocp.horizon", "steps", 20, positive=True)
    dt = _num(hd, "ocp.horizon", "dt", 0.05, positive=True)
    try:
        horizon = Horizon(int(steps), dt)
    except ValueError as e:
        raise ConfigError("ocp.horizon", str(e))

    pd = _need(data, "<root>", "plant", {})
    plant = PlantParams(
        rate_tau=_num(pd, "plant", "rate_tau", 0.03, positive=True),
        rate_ki=_num(pd, "plant", "rate_ki", 2.0),
        c_max=_num(pd, "plant", "c_max", 25.0, positive=True),
    )
    start_p = _vec(pd, "plant", "start_p", 3, [0.0, 0.0, 1.0])
    start_v = _vec(pd, "plant", "start_v", 3, [0.0, 0.0, 0.0])
    start_q = _vec(pd, "plant", "start_q_wb", 4, [1.0, 0.0, 0.0, 0.0])

    nd = _need(data, "<root>", "noise", {})
    cycles = _need(nd, "noise", "dropout_cycles", [])
    if not isinstance(cycles, (list, tuple)) or not all(
        isinstance(c, int) and not isinstance(c, bool) for c in cycles
    ):
        raise ConfigError("noise.dropout_cycles", "expected a list of cycle indices")
    dropout_prob = _num(nd, "noise", "dropout_prob", 0.0)
    if not 0.0 <= dropout_prob < 1.0:
        raise ConfigError("noise.dropout_prob", "must be in [0, 1)")
    noise = DetectionNoise(
        pixel_std=_num(nd, "noise", "pixel_std", 1.0),
        bbox_frac=_num(nd, "noise", "bbox_frac", 0.02),
        dropout_prob=dropout_prob,
        dropout_cycles=tuple(cycles),
        perfect_range=bool(_need(nd, "noise", "perfect_range", False)),
    )
    if noise.pixel_std < 0 or noise.bbox_frac < 0:
        raise ConfigError("noise.pixel_std", "noise levels must be nonnegative")

    sd = _need(data, "<root>", "sim", {})
    duration = _num(sd, "sim", "duration", 15.0)
    if duration < 0:
        raise ConfigError("sim.duration", "must be nonnegative")
    physics_dt = _num(sd, "sim", "physics_dt", 1e-3, positive=True)
    if physics_dt > 1e-3 + 1e-12:
        raise ConfigError("sim.physics_dt", "physics step must be at most 1 ms")
    seed = _need(sd, "sim", "seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("sim.seed", "must be an integer")
    sqp_iterations = _need(sd, "sim", "sqp_iterations", 3)
    if not isinstance(sqp_iterations, int) or sqp_iterations < 1:
        raise ConfigError("sim.sqp_iterations", "must be a positive integer")
    feedforward = bool(_need(sd, "sim", "velocity_feedforward", False))
    ff_window = _num(sd, "sim", "feedforward_window_s", 0.5, positive=True)

    return ScenarioConfig(
        name=str(_need(data, "<root>", "name", name)),
        intrinsics=intr,
        bound=bound,
        rig=rig,
        track=track,
        d_gate=d_gate,
        weights=weights,
        references=references,
        t_c_min=t_c_min,
        c_min=c_min,
        c_max=c_max,
        omega_max=omega_max,
        constraint_mode=mode,
        horizon=horizon,
        plant=plant,
        noise=noise,
        start_p=start_p,
        start_v=start_v,
        start_q_wb=start_q,
        duration=duration,
        physics_dt=physics_dt,
        seed=int(seed),
        sqp_iterations=int(sqp_iterations),
        velocity_feedforward=feedforward,
        feedforward_window_s=ff_window,
        out_dir=str(_need(sd, "sim", "out", "out")),
        raw=data,
    )


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Patch dotted-path key=value pairs into a nested config dict.

    Values are parsed as YAML scalars, so numbers, booleans, and lists
    all work: --set ocp.weights.q_u=3 --set noise.dropout_cycles=[5,6].
    """
    out = yaml.safe_load(yaml.safe_dump(data))  # deep copy of plain data
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like path.to.key=value")
        key, value = item.split("=", 1)
        node = out
        parts = key.strip().split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                node[part] = {}
            node = node[part]
        node[parts[-1]] = yaml.safe_load(value)
    return out


def load_file(path, overrides: list[str] | None = None) -> ScenarioConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(str(path), f"not valid YAML: {e}")
    if overrides:
        data = apply_overrides(data, overrides)
    return parse(data, name=path.stem)


def bundled_config_path(name: str) -> Path:
    """Path of a packaged scenario file, e.g. 'stationary.cfg'."""
    return Path(resources.files("svpc") / "configs" / name)
