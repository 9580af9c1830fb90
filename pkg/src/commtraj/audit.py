"""Independent audit of a solution by open-loop re-simulation.

The optimized controls are held constant over each segment and the full
nonlinear dynamics are integrated from the start state alone. Nothing from
the solver's node states is reused, so defects cannot hide here.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from . import channel
from .discretize import ATOL, RTOL, IntegrationError
from .dynamics import ATT, POS, RATE, VEL, QuadrotorParams, SingularAttitudeError, dynamics_rhs
from .problem import Scenario, Trajectory, energy_cost

REFINE = 10
PITCH_GUARD = 1e-6  # rad from +-pi/2


@dataclass(frozen=True)
class AuditTolerances:
    position: float = 1.0       # m
    velocity: float = 0.1       # m/s
    attitude: float = 0.02      # rad
    obstacle: float = 0.5       # m
    throughput: float = 1.0e-3  # relative
    control: float = 1.0e-6     # relative to the bound


@dataclass
class BoundViolation:
    node: int
    constraint: str
    magnitude: float


@dataclass
class AuditReport:
    terminal_state_error: np.ndarray        # (12,) x(T) - x_goal
    terminal_group_errors: dict             # 2-norm per state group
    min_obstacle_margin: float              # m, closest horizontal approach to any obstacle axis
    min_obstacle_clearance: float           # m, that distance minus the safe radius (worst obstacle)
    min_standoff_margin: float              # m, inf without a standoff sphere
    achieved_throughput: float              # bits, fine grid
    coarse_throughput: float                # bits, node grid
    required_throughput: float
    energy: float
    bound_violations: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    passed: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["terminal_state_error"] = [float(v) for v in self.terminal_state_error]
        for key in ("min_obstacle_margin", "min_obstacle_clearance", "min_standoff_margin"):
            if not np.isfinite(d[key]):
                d[key] = None
        return d


def resimulate(controls, T: float, x0, p: QuadrotorParams, refine: int = REFINE) -> Trajectory:
    """Open-loop ZOH simulation sampled ``refine`` times per segment.

    Returns a uniform-grid :class:`Trajectory` with ``(N-1)*refine + 1`` nodes
    whose control column holds the applied (segment) control.
    """
    U = np.asarray(controls, dtype=float)
    x = np.asarray(x0, dtype=float).copy()
    if not T > 0:
        raise ValueError("T must be positive")
    if refine < 1:
        raise ValueError("refine must be at least 1")
    K = U.shape[0] - 1
    h = T / K
    X_out = [x.copy()]
    U_out = []

    def pitch_limit(_, y, u):
        return np.cos(y[7]) - PITCH_GUARD

    pitch_limit.terminal = True

    for k in range(K):
        u = U[k]
        t0, t1 = k * h, (k + 1) * h
        grid = t0 + h * np.arange(1, refine + 1) / refine
        grid[-1] = t1
        sol = solve_ivp(lambda _, y, u=u: dynamics_rhs(y, u, p), (t0, t1), x, method="DOP853",
                        t_eval=grid, events=pitch_limit, args=(u,), rtol=RTOL, atol=ATOL)
        if sol.status == 1:
            raise SingularAttitudeError(f"pitch reaches +-90 deg at t = {sol.t_events[0][0]:.6g} s")
        if not sol.success:
            raise IntegrationError(f"re-simulation failed in segment {k}: {sol.message}")
        X_out.extend(sol.y.T)
        U_out.extend([u] * refine)
        x = sol.y[:, -1]
    U_out.append(U[-1])
    return Trajectory(np.array(X_out), np.array(U_out), T)


def _bound_violations(traj: Trajectory, fine: Trajectory, sc: Scenario, tol: AuditTolerances) -> list:
    p = sc.quad
    out = []
    u1 = traj.U[:, 0]
    tmax = np.broadcast_to(np.asarray(p.torque_max, dtype=float), (3,))
    slack_f = tol.control * p.u1_max
    for k in np.flatnonzero(u1 < -slack_f):
        out.append(BoundViolation(int(k), "thrust_min", float(-u1[k])))
    for k in np.flatnonzero(u1 > p.u1_max + slack_f):
        out.append(BoundViolation(int(k), "thrust_max", float(u1[k] - p.u1_max)))
    excess = np.abs(traj.U[:, 1:]) - tmax
    for k, i in zip(*np.nonzero(excess > tol.control * tmax)):
        out.append(BoundViolation(int(k), f"torque_{'xyz'[i]}", float(excess[k, i])))
    # attitude and altitude on the fine grid, reported at the nearest coarse node
    r = (fine.N - 1) // (traj.N - 1)
    for idx, lim, name in ((6, p.phi_max, "roll"), (7, p.theta_max, "pitch")):
        over = np.abs(fine.X[:, idx]) - lim
        for j in np.flatnonzero(over > tol.attitude):
            out.append(BoundViolation(int(round(j / r)), name, float(over[j])))
    if sc.z_min is not None:
        under = sc.z_min - fine.X[:, 2]
        for j in np.flatnonzero(under > tol.obstacle):
            out.append(BoundViolation(int(round(j / r)), "altitude", float(under[j])))
    if not sc.T_min * (1 - 1e-9) <= traj.T <= sc.T_max * (1 + 1e-9):
        out.append(BoundViolation(-1, "mission_time", float(max(sc.T_min - traj.T, traj.T - sc.T_max))))
    return out


def audit(sol, sc: Scenario, tol: AuditTolerances | None = None, refine: int = REFINE) -> AuditReport:
    """Check a solution (``SolveResult`` or ``Trajectory``) against the scenario."""
    tol = tol or AuditTolerances()
    traj = getattr(sol, "trajectory", sol)
    fine = resimulate(traj.U, traj.T, sc.x_start, sc.quad, refine)

    err = fine.X[-1] - sc.x_goal
    groups = {name: float(np.linalg.norm(err[s])) for name, s in
              (("position", POS), ("velocity", VEL), ("attitude", ATT), ("rate", RATE))}
    failures = []
    for name in ("position", "velocity", "attitude"):
        if groups[name] > getattr(tol, name):
            failures.append(f"terminal {name} error {groups[name]:.4g} > {getattr(tol, name):g}")

    pos = fine.positions
    clear = [ob.margin(pos) for ob in sc.obstacles]
    min_obs = min((float(np.min(c)) + ob.radius for c, ob in zip(clear, sc.obstacles)), default=np.inf)
    min_clear = min((float(np.min(c)) for c in clear), default=np.inf)
    for j, c in enumerate(clear):
        if np.min(c) < -tol.obstacle:
            failures.append(f"obstacle {j} penetrated by {-np.min(c):.4g} m")
    min_stand = np.inf
    if sc.gs_standoff is not None:
        min_stand = float(np.min(np.linalg.norm(pos - sc.channel.r_gs, axis=1)) - sc.gs_standoff)
        if min_stand < -tol.obstacle:
            failures.append(f"ground-station standoff penetrated by {-min_stand:.4g} m")

    q_fine = channel.throughput(pos, fine.T, sc.channel)
    q_coarse = channel.throughput(traj.positions, traj.T, sc.channel)
    if sc.q_min > 0 and q_fine < sc.q_min * (1 - tol.throughput):
        failures.append(f"throughput {q_fine:.6g} < {sc.q_min:.6g} bits")

    bounds = _bound_violations(traj, fine, sc, tol)
    if bounds:
        failures.append(f"{len(bounds)} bound violation(s)")
    return AuditReport(
        terminal_state_error=err,
        terminal_group_errors=groups,
        min_obstacle_margin=min_obs,
        min_obstacle_clearance=min_clear,
        min_standoff_margin=min_stand,
        achieved_throughput=float(q_fine),
        coarse_throughput=float(q_coarse),
        required_throughput=float(sc.q_min),
        energy=energy_cost(fine),
        bound_violations=bounds,
        failures=failures,
        passed=not failures,
    )
