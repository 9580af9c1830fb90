"""Artifact emission and trajectory-file reading.

Every file is written deterministically: floats use ``repr`` round-trip
precision and no timestamps or timings are recorded, so identical inputs
give byte-identical outputs. Column dictionaries live in
``docs/file_formats.md``.
"""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from . import channel
from .audit import AuditReport
from .discretize import discretize_trajectory
from .problem import (DegenerateReferenceError, Scenario, Trajectory, energy_cost, initial_guess, lateral_offset_toward_gs,
                      sample_positions)
from .scp import SolveResult

TRAJECTORY_COLUMNS = (
    ["tau", "t_s", "x_m", "y_m", "z_m", "vx_m_s", "vy_m_s", "vz_m_s",
     "roll_rad", "pitch_rad", "yaw_rad", "p_rad_s", "q_rad_s", "r_rad_s",
     "thrust_n", "torque_x_n_m", "torque_y_n_m", "torque_z_n_m",
     "rate_bps", "cumulative_bits"]
)

FILES = {
    "trajectory": "trajectory.csv",
    "iterations": "iterations.jsonl",
    "audit": "audit.json",
    "summary": "summary.json",
    "plot": "plot_points.json",
    "config": "config.yaml",
}


def _fmt(v: float) -> str:
    return repr(float(v))


def sampled_throughput(traj: Trajectory, sc: Scenario) -> tuple[float, np.ndarray]:
    """Throughput on the constraint samples and its running total at each node."""
    disc = discretize_trajectory(traj, sc.quad, sc.substeps) if sc.substeps > 1 else None
    pos = sample_positions(traj, sc, disc)
    cum = channel.cumulative_throughput(pos, traj.T, sc.channel)
    return float(cum[-1]), cum[::sc.substeps]


def trajectory_table(traj: Trajectory, sc: Scenario) -> str:
    rate = channel.expected_rate(traj.positions, sc.channel)
    _, cum = sampled_throughput(traj, sc)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRAJECTORY_COLUMNS)
    for k in range(traj.N):
        row = [traj.tau[k], traj.t[k], *traj.X[k], *traj.U[k], rate[k], cum[k]]
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def read_trajectory(path) -> Trajectory:
    """Read a trajectory table written by :func:`emit_outputs`."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != TRAJECTORY_COLUMNS:
        raise ValueError(f"{path}: header does not match the trajectory format")
    data = np.array([[float(v) for v in r] for r in rows[1:]])
    if data.shape[0] < 2:
        raise ValueError(f"{path}: need at least two nodes")
    T = float(data[-1, 1])
    return Trajectory(data[:, 2:14], data[:, 14:18], T)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False, allow_nan=False) + "\n"


def _clean(x):
    """Recursively convert numpy scalars/arrays and non-finite floats for JSON."""
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (np.floating, float)):
        return float(x) if np.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def plot_points(traj: Trajectory, sc: Scenario, circle_points: int = 72) -> dict:
    guess = initial_guess(sc)
    ang = np.linspace(0.0, 2.0 * np.pi, circle_points + 1)
    obstacles = [{
        "center": list(ob.center),
        "radius": ob.radius,
        "outline": np.c_[ob.center[0] + ob.radius * np.cos(ang), ob.center[1] + ob.radius * np.sin(ang)].tolist(),
    } for ob in sc.obstacles]
    gs = sc.channel.r_gs
    return _clean({
        "top_view": {
            "trajectory": traj.positions[:, :2],
            "initial_guess": guess.positions[:, :2],
            "start": sc.x_start[:2],
            "goal": sc.x_goal[:2],
            "ground_station": gs[:2],
            "obstacles": obstacles,
        },
        "isometric": {
            "trajectory": traj.positions,
            "initial_guess": guess.positions,
            "start": sc.x_start[:3],
            "goal": sc.x_goal[:3],
            "ground_station": gs,
        },
    })


def _lateral_offset(traj: Trajectory, sc: Scenario) -> float | None:
    try:
        return lateral_offset_toward_gs(traj.positions, sc)
    except DegenerateReferenceError:
        return None


def summary(result: SolveResult, report: AuditReport | None, sc: Scenario, document: dict | None = None) -> dict:
    traj = result.trajectory
    out = {
        "scenario": sc.name,
        "status": result.status,
        "message": result.message,
        "iterations": len(result.log),
        "T_s": traj.T,
        "energy": energy_cost(traj),
        "J_hat": result.J_hat,
        "q_min_bits": sc.q_min,
        "q_achieved_bits": sampled_throughput(traj, sc)[0],
        "q_nodes_bits": channel.throughput(traj.positions, traj.T, sc.channel),
        "lateral_offset_m": _lateral_offset(traj, sc),
        "audit_passed": None if report is None else report.passed,
        "valid": bool(result.converged and report is not None and report.passed),
    }
    if document is not None:
        out["config"] = document
    return _clean(out)


def emit_outputs(result: SolveResult, report: AuditReport | None, sc: Scenario, outdir,
                 document: dict | None = None) -> dict:
    """Write every artifact into ``outdir``; returns ``{kind: path}``."""
    from .config import dumps

    outdir = Path(outdir)
    try:
        outdir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {outdir}: {exc}") from exc
    paths = {k: outdir / v for k, v in FILES.items()}
    contents = {
        "trajectory": trajectory_table(result.trajectory, sc),
        "iterations": "".join(json.dumps(_clean(r.to_dict(timing=False))) + "\n" for r in result.log),
        "audit": _json(_clean(report.to_dict())) if report is not None else None,
        "summary": _json(summary(result, report, sc, document)),
        "plot": _json(plot_points(result.trajectory, sc)),
        "config": dumps(document) if document is not None else None,
    }
    written = {}
    for kind, text in contents.items():
        if text is None:
            continue
        try:
            paths[kind].write_text(text)
        except OSError as exc:
            raise OSError(f"cannot write {paths[kind]}: {exc}") from exc
        written[kind] = paths[kind]
    return written
