"""Trust-region sequential convex programming loop."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .channel import CoincidentPositionError
from .discretize import DiscretizedSystem, IntegrationError, discretize_trajectory, trapz_weights
from .dynamics import SingularAttitudeError
from .problem import (Scaling, Scenario, Trajectory, constraint_rows, default_scaling, energy_cost,
                      initial_guess, linearize_nonconvex)
from .subproblem import NEAR_OPTIMAL, OPTIMAL, Bounds, assemble, convex_data, solve

log = logging.getLogger(__name__)

DEFECT_TOL = 1e-12  # scaled, target of the final defect projection

CONVERGED = "converged"
MAX_ITERS = "max_iters"
STALLED = "stalled"


@dataclass
class ScpConfig:
    lam: float = 1.0e3
    eps: float = 1.0e-4
    iter_max: int = 50
    rho0: float = 0.01
    rho1: float = 0.25
    rho2: float = 0.7
    alpha: float = 2.0
    trust_init: float = 1.0
    trust_min: float = 1.0e-4
    trust_max: float = 64.0
    feas_tol: float = 1.0e-6
    max_rejections: int = 10
    # Newton steps of the second-order correction tried on steps scoring
    # below rho0; 0 scores only the raw QP solution
    correction_steps: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0 < self.rho0 < self.rho1 < self.rho2 < 1:
            raise ValueError("require 0 < rho0 < rho1 < rho2 < 1")
        if not self.alpha > 1:
            raise ValueError("alpha must exceed 1")
        if not self.lam > 0:
            raise ValueError("lam must be positive")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.iter_max < 1:
            raise ValueError("iter_max must be at least 1")
        if not 0 < self.trust_min <= self.trust_init <= self.trust_max:
            raise ValueError("require 0 < trust_min <= trust_init <= trust_max")
        if self.max_rejections < 1:
            raise ValueError("max_rejections must be at least 1")
        if not self.feas_tol > 0:
            raise ValueError("feas_tol must be positive")
        if self.correction_steps < 0:
            raise ValueError("correction_steps must be nonnegative")


@dataclass
class IterationRecord:
    iter: int
    J_hat_ref: float
    L_star: float | None
    J_hat_star: float | None
    rho: float | None
    trust: float
    trust_next: float
    accepted: bool
    nu_norm: float | None
    nus_norm: float | None
    max_defect: float | None
    T_current: float
    energy: float
    solver_status: str
    gap: float | None = None
    wall_time: float = 0.0

    def to_dict(self, timing: bool = True) -> dict:
        """Plain record; non-finite values become None. ``timing=False`` drops
        the wall-clock field so that emitted logs are reproducible."""
        d = {k: (None if isinstance(v, float) and not np.isfinite(v) else v) for k, v in asdict(self).items()}
        if not timing:
            d.pop("wall_time")
        return d


@dataclass
class SolveResult:
    trajectory: Trajectory
    status: str
    log: list[IterationRecord] = field(default_factory=list)
    message: str = ""
    J_hat: float = np.nan
    scaling: Scaling | None = None

    @property
    def T(self) -> float:
        return self.trajectory.T

    @property
    def energy(self) -> float:
        return energy_cost(self.trajectory)

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED


@dataclass
class CostBreakdown:
    energy: float      # normalized
    defect: float      # weighted scaled 1-norm
    violation: float   # weighted scaled positive parts
    lam: float

    @property
    def total(self) -> float:
        return self.energy + self.lam * (self.defect + self.violation)


def cost_breakdown(traj: Trajectory, sc: Scenario, lam: float, scaling: Scaling,
                   disc: DiscretizedSystem | None = None) -> CostBreakdown:
    if disc is None:
        disc = discretize_trajectory(traj, sc.quad, sc.substeps)
    w = trapz_weights(traj.N)
    delta = disc.defects / scaling.x
    defect = float(w[:-1] @ np.sum(np.abs(delta), axis=1))
    values, scale, weight = constraint_rows(traj, sc, scaling, disc)
    violation = float(weight @ (np.maximum(values, 0.0) / scale)) if values.size else 0.0
    return CostBreakdown(energy_cost(traj) / scaling.energy, defect, violation, lam)


def penalized_cost(traj: Trajectory, sc: Scenario, lam: float, scaling: Scaling | None = None,
                   disc: DiscretizedSystem | None = None) -> float:
    """Nonlinear penalized cost: normalized energy + lam * (defects + violations)."""
    return cost_breakdown(traj, sc, lam, scaling or default_scaling(sc), disc).total


def acceptance_ratio(J_ref: float, J_star: float, L_star: float) -> float:
    denom = J_ref - L_star
    if abs(denom) < 1e-14:
        raise ZeroDivisionError("predicted reduction is zero; stopping criterion should have fired")
    return (J_ref - J_star) / denom


def trust_update(rho: float, trust: float, cfg: ScpConfig) -> tuple[float, bool]:
    if rho < cfg.rho0:
        return max(trust / cfg.alpha, cfg.trust_min), False
    if rho < cfg.rho1:
        return max(trust / cfg.alpha, cfg.trust_min), True
    if rho < cfg.rho2:
        return trust, True
    return min(trust * cfg.alpha, cfg.trust_max), True


def _at_bounds(traj: Trajectory, bounds: Bounds, scaling: Scaling, tol: float = 1e-7) -> np.ndarray:
    """Mask over ``[X.ravel(), U.ravel()]`` of components sitting on a box bound."""
    out = []
    for V, lo, hi, s in ((traj.X, bounds.x_lower, bounds.x_upper, scaling.x),
                         (traj.U, bounds.u_lower, bounds.u_upper, scaling.u)):
        out.append(((V - lo) <= tol * s) | ((hi - V) <= tol * s))
    return np.concatenate([o.ravel() for o in out])


def _clip(traj: Trajectory, bounds: Bounds) -> Trajectory:
    return Trajectory(np.clip(traj.X, bounds.x_lower, bounds.x_upper),
                      np.clip(traj.U, bounds.u_lower, bounds.u_upper), traj.T)


def close_defects(traj: Trajectory, sc: Scenario, scaling: Scaling, tol: float = DEFECT_TOL,
                  max_newton: int = 6, frozen: np.ndarray | None = None,
                  target: np.ndarray | None = None) -> tuple[Trajectory, float]:
    """Newton projection onto the nonlinear dynamics with ``T`` held fixed.

    Each step solves the minimum-norm (in scaled units) correction that zeroes
    the linearized defects while keeping both boundary states and the tie of
    the last control. Components flagged in ``frozen`` (a mask over
    ``[X.ravel(), U.ravel()]``) are made far costlier to move, which keeps
    active bounds in place. With ``target`` (``(N-1, nx)``) the defects are
    driven to those values instead of zero. Returns the corrected trajectory
    and its largest scaled distance from the target.

    Open-loop re-simulation of a long hover amplifies node defects by several
    orders of magnitude; this removes them without moving the solution
    beyond the defect size.
    """
    N, nx = traj.X.shape
    nu = traj.U.shape[1]
    K = N - 1
    w = np.r_[np.tile(scaling.x, N), np.tile(scaling.u, N)]
    if frozen is not None:
        w = np.where(frozen, 1e-6 * w, w)
    nz = N * (nx + nu)
    iX = np.arange(N * nx).reshape(N, nx)
    iU = N * nx + np.arange(N * nu).reshape(N, nu)
    goal = np.zeros((K, nx)) if target is None else np.asarray(target, dtype=float)
    cur = traj.copy()
    disc = discretize_trajectory(cur, sc.quad)
    err = float(np.max(np.abs((disc.defects - goal) / scaling.x)))
    for _ in range(max_newton):
        if err <= tol:
            break
        rows, cols, vals = [], [], []
        r = np.arange(K * nx).reshape(K, nx)
        rows += [r.ravel(), np.repeat(r, nx).ravel(), np.repeat(r, nu).ravel()]
        cols += [iX[1:].ravel(), np.broadcast_to(iX[:-1][:, None, :], (K, nx, nx)).ravel(),
                 np.broadcast_to(iU[:-1][:, None, :], (K, nx, nu)).ravel()]
        vals += [np.ones(K * nx), -disc.A.ravel(), -disc.B.ravel()]
        base = K * nx
        for idx in (iX[0], iX[-1]):
            rows.append(base + np.arange(nx)); cols.append(idx); vals.append(np.ones(nx))
            base += nx
        rows += [base + np.arange(nu)] * 2
        cols += [iU[-1], iU[-2]]
        vals += [np.ones(nu), -np.ones(nu)]
        n_c = base + nu
        C = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n_c, nz))
        rhs = np.r_[(goal - disc.defects).ravel(), sc.x_start - cur.X[0], sc.x_goal - cur.X[-1],
                    cur.U[-2] - cur.U[-1]]
        # min |dz / w|^2  s.t.  C dz = rhs, via the KKT system
        kkt = sp.bmat([[sp.diags(1.0 / w**2), C.T], [C, None]], format="csc")
        try:
            sol = spla.spsolve(kkt, np.r_[np.zeros(nz), rhs])
        except RuntimeError as exc:
            log.warning("defect projection failed: %s", exc)
            break
        if not np.all(np.isfinite(sol)):
            break
        dz = sol[:nz]
        cand = Trajectory(cur.X + dz[:N * nx].reshape(N, nx), cur.U + dz[N * nx:].reshape(N, nu), cur.T)
        try:
            d2 = discretize_trajectory(cand, sc.quad)
        except (IntegrationError, SingularAttitudeError) as exc:
            log.warning("defect projection failed: %s", exc)
            break
        e2 = float(np.max(np.abs((d2.defects - goal) / scaling.x)))
        if not e2 < err:
            break
        cur, disc, err = cand, d2, e2
    return cur, err


def _corrected(cand, target, sc, scaling, bounds, steps):
    try:
        out, _ = close_defects(cand, sc, scaling, max_newton=steps, frozen=_at_bounds(cand, bounds, scaling),
                               target=target)
    except (IntegrationError, SingularAttitudeError) as exc:
        log.info("correction skipped: %s", exc)
        return None
    return _clip(out, bounds)


def _evaluate(traj, sc, cfg, scaling):
    try:
        disc = discretize_trajectory(traj, sc.quad, sc.substeps)
        return disc, cost_breakdown(traj, sc, cfg.lam, scaling, disc).total
    except (IntegrationError, SingularAttitudeError, CoincidentPositionError) as exc:
        log.info("candidate evaluation failed: %s", exc)
        return None, np.inf


def run(sc: Scenario, cfg: ScpConfig | None = None, guess: Trajectory | None = None,
        scaling: Scaling | None = None, callback=None) -> SolveResult:
    """Iterate convex subproblems until ``J_ref - L <= eps`` with vanishing virtual controls.

    A converged reference is finally projected onto the nonlinear dynamics
    (:func:`close_defects`) so that open-loop replay of its controls
    reproduces its states.
    """
    cfg = cfg or ScpConfig()
    scaling = scaling or default_scaling(sc)
    data = convex_data(sc, cfg.lam, scaling)
    ref = (guess or initial_guess(sc)).copy()
    ref.U[-1] = ref.U[-2]  # last control is tied to the last held one
    disc_ref, J_ref = _evaluate(ref, sc, cfg, scaling)
    if disc_ref is None:
        raise IntegrationError("initial guess cannot be integrated")
    trust = cfg.trust_init
    floor_rejections = 0
    records: list[IterationRecord] = []
    status, message = MAX_ITERS, f"iteration limit {cfg.iter_max} reached"

    for it in range(1, cfg.iter_max + 1):
        tic = time.perf_counter()
        ncon = linearize_nonconvex(ref, sc, scaling, disc_ref)
        spec = assemble(ref, disc_ref, ncon, data, trust)
        sol = solve(spec)
        max_def = float(np.max(np.abs(disc_ref.defects / scaling.x)))

        if sol.solver_status not in (OPTIMAL, NEAR_OPTIMAL):
            new_trust = max(trust / cfg.alpha, cfg.trust_min)
            rec = IterationRecord(it, J_ref, None, None, None, trust, new_trust, False, None, None,
                                  max_def, ref.T, energy_cost(ref), sol.solver_status,
                                  wall_time=time.perf_counter() - tic)
            records.append(rec)
            log.warning("iter %d: subproblem %s, trust -> %.3g", it, sol.solver_status, new_trust)
            floor_rejections = floor_rejections + 1 if trust <= cfg.trust_min else 0
            trust = new_trust
            if callback:
                callback(rec)
            if floor_rejections >= cfg.max_rejections:
                status, message = STALLED, "repeated subproblem failures at minimum trust radius"
                break
            continue

        L = sol.objective_L
        gap = J_ref - L
        if gap <= cfg.eps:
            feasible = sol.nu_norm <= cfg.feas_tol and sol.nus_norm <= cfg.feas_tol
            rec = IterationRecord(it, J_ref, L, None, None, trust, trust, False, sol.nu_norm, sol.nus_norm,
                                  max_def, ref.T, energy_cost(ref), sol.solver_status, gap,
                                  time.perf_counter() - tic)
            records.append(rec)
            if callback:
                callback(rec)
            if feasible:
                status, message = CONVERGED, f"gap {gap:.3g} <= eps with vanishing virtual controls"
            else:
                status = STALLED
                message = (f"stationary but infeasible: |nu|={sol.nu_norm:.3g}, |nu_s|={sol.nus_norm:.3g}; "
                           "try a larger penalty weight")
            log.info("iter %d: stop (%s)", it, message)
            break

        cand = sol.trajectory
        disc_cand, J_star = _evaluate(cand, sc, cfg, scaling)
        rho = acceptance_ratio(J_ref, J_star, L)
        if cfg.correction_steps and rho < cfg.rho0:
            # the linearized step leaves defects of second order beyond the
            # virtual controls it chose; the exact penalty charges them at
            # full weight, which can cap the trust radius. Score the step
            # projected back onto the model's defects as well, keep the better
            alt = _corrected(cand, sol.nu * scaling.x, sc, scaling, data.bounds, cfg.correction_steps)
            if alt is not None:
                disc_alt, J_alt = _evaluate(alt, sc, cfg, scaling)
                if J_alt < J_star:
                    cand, disc_cand, J_star = alt, disc_alt, J_alt
                    rho = acceptance_ratio(J_ref, J_star, L)
        new_trust, accepted = trust_update(rho, trust, cfg)
        rec = IterationRecord(it, J_ref, L, J_star, rho, trust, new_trust, accepted, sol.nu_norm, sol.nus_norm,
                              max_def, cand.T, energy_cost(cand), sol.solver_status, gap,
                              time.perf_counter() - tic)
        records.append(rec)
        log.info("iter %2d  J=%.6g L=%.6g J*=%.6g rho=%.3g trust=%.3g T=%.1f %s",
                 it, J_ref, L, J_star, rho, trust, cand.T, "accept" if accepted else "reject")
        if callback:
            callback(rec)
        if accepted:
            ref, disc_ref, J_ref = cand, disc_cand, J_star
            floor_rejections = 0
        elif trust <= cfg.trust_min:
            floor_rejections += 1
        trust = new_trust
        if floor_rejections >= cfg.max_rejections:
            status, message = STALLED, f"{cfg.max_rejections} consecutive rejections at minimum trust radius"
            break

    if status == CONVERGED:
        ref, err = close_defects(ref, sc, scaling)
        if err > DEFECT_TOL:
            log.warning("defect projection stopped at scaled defect %.3g", err)
        J_ref = cost_breakdown(ref, sc, cfg.lam, scaling).total
    return SolveResult(ref, status, records, message, J_ref, scaling)
