"""Command-line front end: run scenarios, check configs, single solves.

    svpc run        --config stationary.cfg [--set k=v ...] [--out DIR] [--seed N]
    svpc check      --config stationary.cfg
    svpc solve_once --config stationary.cfg [--state JSON] [--out DIR]

Everything the CLI does is a thin shell over library calls; outputs are
the scenario log CSV, a metrics summary, and the per-cycle solve
reports.  Exit codes: 0 success, 1 solver abort, 2 invalid config or
arguments.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import manifold as mf
from .config import ConfigError, ScenarioConfig, bundled_config_path, load_file
from .dynamics import ServoState
from .simulator import metrics, run_scenario, target_position
from .solver import SolveReport, initial_trajectory, solve_receding


def _resolve_config(path_str: str) -> Path:
    p = Path(path_str)
    if p.exists():
        return p
    bundled = bundled_config_path(path_str)
    if bundled.exists():
        return bundled
    raise FileNotFoundError(f"no such config: {path_str}")


def _load(args) -> ScenarioConfig:
    path = _resolve_config(args.config)
    overrides = list(args.set or [])
    cfg = load_file(path, overrides)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    return cfg


def cmd_run(args) -> int:
    cfg = _load(args)
    setup = cfg.build_setup()
    log = run_scenario(setup)

    out = Path(cfg.out_dir) / cfg.name
    out.mkdir(parents=True, exist_ok=True)
    log.to_csv(out / "log.csv")
    if log.n_cycles:
        m = metrics(
            log,
            r_star=cfg.references.r_star,
            target_start=target_position(cfg.track, 0.0),
            start=cfg.start_p,
        )
        (out / "metrics.txt").write_text(m.summary())
        print(m.summary(), end="")
    print(f"log: {out / 'log.csv'} ({log.n_cycles} cycles)")
    if log.aborted:
        print("solver aborted; partial log written", file=sys.stderr)
        return 1
    return 0


def cmd_check(args) -> int:
    _load(args)
    print("ok")
    return 0


def _state_from_literal(cfg: ScenarioConfig, literal: str | None) -> ServoState:
    if literal is None:
        # scenario initial state: at the start pose, looking at the target
        target = target_position(cfg.track, 0.0)
        p_cam = cfg.start_p + mf.rotate(cfg.start_q_wb, cfg.rig.p_cb_b)
        q_wc = mf.quat_mul(cfg.start_q_wb, cfg.rig.q_bc)
        d = mf.rotate(mf.quat_conj(q_wc), target - p_cam)
        r = float(np.linalg.norm(d))
        return ServoState(cfg.start_v, cfg.start_q_wb, mf.from_bearing(d / r), r)
    try:
        obj = json.loads(literal)
        v = np.asarray(obj["v_w"], dtype=float).reshape(3)
        q_wb = np.asarray(obj["q_wb"], dtype=float).reshape(4)
        r = float(obj["r"])
        if "rho" in obj:
            rho = np.asarray(obj["rho"], dtype=float).reshape(3)
            q = mf.from_bearing(rho / np.linalg.norm(rho))
        else:
            q = np.asarray(obj["q"], dtype=float).reshape(4)
        return ServoState(v, q_wb, q, r)
    except (KeyError, ValueError, TypeError, json.JSONDecodeError) as e:
        raise ConfigError("--state", f"bad state literal: {e}")


def cmd_solve_once(args) -> int:
    cfg = _load(args)
    x_hat = _state_from_literal(cfg, args.state)
    problem = cfg.build_problem()
    u0, traj, report = solve_receding(
        problem, x_hat, warm=None, iterations=args.iterations
    )
    print(f"u0: thrust={u0.c:.4f} m/s^2, omega={np.array2string(u0.omega_b, precision=4)}")
    for f in SolveReport.CSV_FIELDS:
        print(f"{f}: {getattr(report, f)}")

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "predicted_trajectory.csv"
    with open(path, "w") as f:
        f.write("k,v_x,v_y,v_z,qw,qx,qy,qz,fqw,fqx,fqy,fqz,r\n")
        for k in range(traj.states.shape[0]):
            f.write(f"{k}," + ",".join(repr(float(v)) for v in traj.states[k]) + "\n")
    print(f"trajectory: {path}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="svpc",
        description="Spherical visual predictive control scenario runner",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="scenario file (path or bundled name)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted-path config override, repeatable")
        p.add_argument("--out", help="output directory (overrides sim.out)")
        p.add_argument("--seed", type=int, help="RNG seed (overrides sim.seed)")

    p_run = sub.add_parser("run", help="run a closed-loop scenario")
    common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_check = sub.add_parser("check", help="validate a scenario file")
    common(p_check)
    p_check.set_defaults(func=cmd_check)

    p_once = sub.add_parser("solve_once", help="one receding-horizon solve")
    common(p_once)
    p_once.add_argument("--state", help='JSON state literal, e.g. '
                        '\'{"v_w":[0,0,0],"q_wb":[1,0,0,0],"rho":[0,0,1],"r":5}\'')
    p_once.add_argument("--iterations", type=int, default=10,
                        help="SQP iterations for the single solve")
    p_once.set_defaults(func=cmd_solve_once)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
