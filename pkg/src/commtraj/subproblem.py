"""Convex subproblem: canonical QP assembly and solve.

Decision vector (all in scaled units)::

    [ X (N*nx) | U (N*nu) | T | nu+ (K*nx) | nu- (K*nx) | nu_s (m) | d (n_s or 0) | tx (N) | tu (N) | tT ]

with ``K = N - 1``. ``d`` are slant distances from the ``n_s`` constraint
samples to the ground station, present only when the throughput row is
modelled through them. The dynamics virtual control is ``nu = nu+ - nu-``;
the nonnegative split makes the 1-norm penalty linear. ``tx, tu, tT`` are
epigraph variables of the per-node infinity norms in the trust region
``|dx_k|_inf + |du_k|_inf + |dT| <= trust``.

The canonical form is Clarabel's::

    minimize    0.5 z'Pz + q'z + const
    subject to  A z + s = b,   s in {0}^n_eq x R+^n_ineq x SOC(4)^n_soc

Each second-order cone reads ``|r_i - r_gs| <= d_i`` for a sample position ``r_i``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import clarabel
import numpy as np
import scipy.sparse as sp

from .discretize import DiscretizedSystem, trapz_weights, zoh_weights
from .problem import NonconvexModel, Scaling, Trajectory

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
NEAR_OPTIMAL = "near_optimal"
INFEASIBLE = "infeasible"
NUMERICAL_FAILURE = "numerical_failure"


@dataclass
class Bounds:
    x_lower: np.ndarray
    x_upper: np.ndarray
    u_lower: np.ndarray
    u_upper: np.ndarray
    T_min: float
    T_max: float


@dataclass
class ConvexData:
    """Scenario-dependent, iteration-independent inputs to :func:`assemble`."""
    x_start: np.ndarray
    x_goal: np.ndarray
    bounds: Bounds
    scaling: Scaling
    lam: float
    r_gs: np.ndarray | None = None  # centre of the slant-distance cones


@dataclass
class SubproblemSpec:
    P: sp.csc_matrix
    q: np.ndarray
    A: sp.csc_matrix
    b: np.ndarray
    n_eq: int
    n_ineq: int
    n_soc: int
    const: float
    N: int
    nx: int
    nu: int
    m: int
    layout: dict = field(repr=False)
    data: ConvexData = field(repr=False)
    ref: Trajectory = field(repr=False)
    nu_weight: np.ndarray = field(repr=False)
    nus_weight: np.ndarray = field(repr=False)
    trust: float = 0.0
    dist_ref: np.ndarray | None = field(default=None, repr=False)
    disc: DiscretizedSystem | None = field(default=None, repr=False)
    ncon: NonconvexModel | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.P.shape[0]

    def objective(self, z) -> float:
        """Linearized penalized cost of the convex model at ``z``."""
        return float(0.5 * z @ (self.P @ z) + self.q @ z + self.const)

    def zero_step(self) -> np.ndarray:
        """Decision vector of ``dZ = 0`` with minimal slacks (always feasible)."""
        lay, sc = self.layout, self.data.scaling
        ref = self.ref
        z = np.zeros(self.n)
        z[lay["X"]] = (ref.X / sc.x).ravel()
        z[lay["U"]] = (ref.U / sc.u).ravel()
        z[lay["T"]] = ref.T / sc.T
        if self.dist_ref is not None:
            z[lay["dist"]] = self.dist_ref / sc.length
        if self.disc is not None:
            nu = ((ref.X[1:] - self.disc.x_next) / sc.x).ravel()
            z[lay["nup"]] = np.maximum(nu, 0.0)
            z[lay["nun"]] = np.maximum(-nu, 0.0)
        if self.ncon is not None and self.m:
            z[lay["nus"]] = np.maximum(self.ncon.value / self.ncon.scale, 0.0)
        return z

    def dump(self, path) -> None:
        """Write the canonical form as coordinate-sparse text for external solvers."""
        with open(path, "w") as fh:
            fh.write(f"# commtraj canonical QP\n# n {self.n}\n# n_eq {self.n_eq}\n# n_ineq {self.n_ineq}\n"
                     f"# n_soc4 {self.n_soc}\n")
            fh.write(f"# const {self.const!r}\n")
            for name, M in (("P", self.P), ("A", self.A)):
                M = M.tocoo()
                fh.write(f"[{name}] {M.shape[0]} {M.shape[1]} {M.nnz}\n")
                for i, j, v in zip(M.row, M.col, M.data):
                    fh.write(f"{i} {j} {v!r}\n")
            for name, v in (("q", self.q), ("b", self.b)):
                fh.write(f"[{name}] {len(v)}\n")
                fh.write("\n".join(repr(float(x)) for x in v) + "\n")


@dataclass
class SubproblemSolution:
    trajectory: Trajectory | None
    nu: np.ndarray | None          # (K, nx), scaled
    nu_s: np.ndarray | None        # (m,), scaled
    nu_norm: float
    nus_norm: float
    objective_L: float
    solver_status: str
    iterations: int = 0
    solve_time: float = 0.0


def _layout(N, nx, nu, m, nd=0):
    K = N - 1
    sizes = [("X", N * nx), ("U", N * nu), ("T", 1), ("nup", K * nx), ("nun", K * nx),
             ("nus", m), ("dist", nd), ("tx", N), ("tu", N), ("tT", 1)]
    lay, off = {}, 0
    for name, n in sizes:
        lay[name] = slice(off, off + n)
        off += n
    lay["n"] = off
    return lay


class _Rows:
    """COO accumulator for a block of constraint rows."""

    def __init__(self):
        self.r, self.c, self.v, self.rhs = [], [], [], []
        self.count = 0

    def add(self, rows, cols, vals):
        self.r.append(np.asarray(rows, dtype=np.int64).ravel() + self.count)
        self.c.append(np.asarray(cols, dtype=np.int64).ravel())
        self.v.append(np.asarray(vals, dtype=float).ravel())

    def close(self, rhs):
        rhs = np.atleast_1d(np.asarray(rhs, dtype=float)).ravel()
        self.rhs.append(rhs)
        self.count += rhs.size

    def matrix(self, n):
        if not self.r:
            return sp.csr_matrix((self.count, n)), np.zeros(self.count)
        M = sp.csr_matrix((np.concatenate(self.v), (np.concatenate(self.r), np.concatenate(self.c))),
                          shape=(self.count, n))
        return M, np.concatenate(self.rhs) if self.rhs else np.zeros(0)


def assemble(ref: Trajectory, disc: DiscretizedSystem, ncon: NonconvexModel, data: ConvexData,
             trust: float) -> SubproblemSpec:
    """Build the canonical QP of the convex subproblem about ``ref``."""
    X_r, U_r, T_r = ref.X, ref.U, ref.T
    N, nx = X_r.shape
    nu = U_r.shape[1]
    K = N - 1
    if disc.A.shape != (K, nx, nx) or disc.B.shape != (K, nx, nu) or disc.F.shape != (K, nx):
        raise ValueError("discretization does not match reference dimensions")
    if ncon.Cx.shape[1] != N * nx or ncon.Du.shape[1] != N * nu:
        raise ValueError("nonconvex model does not match reference dimensions")
    if trust < 0:
        raise ValueError("trust radius must be nonnegative")
    m = ncon.m
    sc = data.scaling
    sx, su, sT = np.asarray(sc.x, float), np.asarray(sc.u, float), float(sc.T)
    nd = len(ncon.dist_ref) if ncon.uses_distance else 0
    if nd and data.r_gs is None:
        raise ValueError("slant-distance model needs the ground-station position")
    L = float(sc.length)
    lay = _layout(N, nx, nu, m, nd)
    n = lay["n"]
    iD = np.arange(nd) + lay["dist"].start
    iX = np.arange(N * nx).reshape(N, nx) + lay["X"].start
    iU = np.arange(N * nu).reshape(N, nu) + lay["U"].start
    iT = lay["T"].start
    iNp = np.arange(K * nx).reshape(K, nx) + lay["nup"].start
    iNn = np.arange(K * nx).reshape(K, nx) + lay["nun"].start
    iS = np.arange(m) + lay["nus"].start
    itx = np.arange(N) + lay["tx"].start
    itu = np.arange(N) + lay["tu"].start
    itT = lay["tT"].start

    eq = _Rows()
    # dynamics, each row divided by the state scale
    rows = np.arange(K * nx).reshape(K, nx)
    Ad = disc.A * sx[None, None, :] / sx[None, :, None]
    Bd = disc.B * su[None, None, :] / sx[None, :, None]
    Fd = disc.F * sT / sx[None, :]
    eq.add(rows, iX[1:], np.ones((K, nx)))
    eq.add(np.repeat(rows[:, :, None], nx, axis=2), np.broadcast_to(iX[:-1][:, None, :], (K, nx, nx)), -Ad)
    eq.add(np.repeat(rows[:, :, None], nu, axis=2), np.broadcast_to(iU[:-1][:, None, :], (K, nx, nu)), -Bd)
    eq.add(rows, np.full((K, nx), iT), -Fd)
    eq.add(rows, iNp, -np.ones((K, nx)))
    eq.add(rows, iNn, np.ones((K, nx)))
    eq.close(disc.rho / sx)
    # boundary conditions
    eq.add(np.arange(nx), iX[0], np.ones(nx))
    eq.close(data.x_start / sx)
    eq.add(np.arange(nx), iX[-1], np.ones(nx))
    eq.close(data.x_goal / sx)
    # the last node's control acts on no segment; it repeats the last held one
    eq.add(np.repeat(np.arange(nu), 2), np.c_[iU[-1], iU[-2]].ravel(), np.tile([1.0, -1.0], nu))
    eq.close(np.zeros(nu))

    ineq = _Rows()
    b = data.bounds

    def box(idx, lower, upper, scale):
        # idx: (N, d) variable indices; lower/upper: (d,)
        for vec, sign in ((upper, 1.0), (lower, -1.0)):
            vec = np.asarray(vec, dtype=float)
            cols = np.flatnonzero(np.isfinite(vec))
            if cols.size == 0:
                continue
            sel = idx[:, cols]
            ineq.add(np.arange(sel.size), sel, np.full(sel.size, sign))
            ineq.close(np.broadcast_to(sign * vec[cols] / scale[cols], sel.shape))

    box(iX, b.x_lower, b.x_upper, sx)
    box(iU, b.u_lower, b.u_upper, su)
    box(np.array([[iT]]), np.array([b.T_min]), np.array([b.T_max]), np.array([sT]))

    # linearized nonconvex rows <= nu_s
    if m:
        Cx = sp.csr_matrix(ncon.Cx).multiply(np.tile(sx, N)[None, :]).tocoo()
        Du = sp.csr_matrix(ncon.Du).multiply(np.tile(su, N)[None, :]).tocoo()
        inv = 1.0 / ncon.scale
        ineq.add(Cx.row, iX.ravel()[Cx.col], Cx.data * inv[Cx.row])
        ineq.add(Du.row, iU.ravel()[Du.col], Du.data * inv[Du.row])
        ineq.add(np.arange(m), np.full(m, iT), ncon.G * sT * inv)
        if nd:
            Cd = sp.csr_matrix(ncon.Cd).tocoo()
            ineq.add(Cd.row, iD[Cd.col], Cd.data * L * inv[Cd.row])
        ineq.add(np.arange(m), iS, -np.ones(m))
        ineq.close(-ncon.residue * inv)
        ineq.add(np.arange(m), iS, -np.ones(m))
        ineq.close(np.zeros(m))
        hard = np.flatnonzero(ncon.hard)
        ineq.add(np.arange(hard.size), iS[hard], np.ones(hard.size))
        ineq.close(np.maximum(ncon.value[hard], 0.0) * inv[hard])
    for idx in (iNp, iNn):
        ineq.add(np.arange(idx.size), idx.ravel(), -np.ones(idx.size))
        ineq.close(np.zeros(idx.size))

    # trust region, measured with its own per-component weights
    wx, wu, wT = sc.trust_weights()
    for idx, ref_vals, tcol, d, coef in ((iX, X_r / wx, itx, nx, sx / wx), (iU, U_r / wu, itu, nu, su / wu)):
        for sign in (1.0, -1.0):
            r = np.arange(N * d).reshape(N, d)
            ineq.add(r, idx, np.broadcast_to(sign * coef, (N, d)))
            ineq.add(r, np.repeat(tcol[:, None], d, axis=1), -np.ones((N, d)))
            ineq.close(sign * ref_vals)
    for sign in (1.0, -1.0):
        ineq.add([0, 0], [iT, itT], [sign * sT / wT, -1.0])
        ineq.close([sign * T_r / wT])
    r = np.arange(N)
    ineq.add(np.concatenate([r, r, r]), np.concatenate([itx, itu, np.full(N, itT)]), np.ones(3 * N))
    ineq.close(np.full(N, float(trust)))

    # cones (d_i, r_i - r_gs) with r_i = pos_map z + pos_offset, as s = b - A z
    soc = _Rows()
    if nd:
        blk = np.arange(4 * nd).reshape(nd, 4)
        soc.add(blk[:, 0], iD, np.full(nd, -L))
        zcols = np.r_[iX.ravel(), iU.ravel(), iT]
        zscale = np.r_[np.tile(sx, N), np.tile(su, N), sT]
        Pm = sp.csr_matrix(ncon.pos_map).tocoo()
        soc.add(blk[:, 1:].ravel()[Pm.row], zcols[Pm.col], -Pm.data * zscale[Pm.col])
        rhs = np.zeros((nd, 4))
        rhs[:, 1:] = ncon.pos_offset.reshape(nd, 3) - np.asarray(data.r_gs, dtype=float)
        soc.close(rhs)

    Aeq, beq = eq.matrix(n)
    Ain, bin_ = ineq.matrix(n)
    Asoc, bsoc = soc.matrix(n)
    A = sp.vstack([Aeq, Ain, Asoc]).tocsc()
    bvec = np.concatenate([beq, bin_, bsoc])

    # objective: convexified energy + lambda * weighted 1-norms
    w = trapz_weights(N)
    wz = zoh_weights(N)
    E = sc.energy
    pdiag = np.zeros(n)
    pdiag[iU] = 2.0 * (wz[:, None] * T_r) * su[None, :] ** 2 / E
    q = np.zeros(n)
    c_T = float(wz @ np.sum(U_r**2, axis=1)) / E
    q[iT] = c_T * sT
    const = -c_T * T_r
    P = sp.diags(pdiag).tocsc()
    nu_weight = w[:-1]
    q[iNp] = data.lam * nu_weight[:, None]
    q[iNn] = data.lam * nu_weight[:, None]
    if m:
        q[iS] = data.lam * ncon.weight

    return SubproblemSpec(P=P, q=q, A=A, b=bvec, n_eq=Aeq.shape[0], n_ineq=Ain.shape[0], n_soc=nd,
                          const=const, dist_ref=ncon.dist_ref, disc=disc, ncon=ncon,
                          N=N, nx=nx, nu=nu, m=m, layout=lay, data=data, ref=ref,
                          nu_weight=nu_weight, nus_weight=np.asarray(ncon.weight), trust=float(trust))


_STATUS = {
    "Solved": OPTIMAL,
    "AlmostSolved": NEAR_OPTIMAL,
    "PrimalInfeasible": INFEASIBLE,
    "DualInfeasible": INFEASIBLE,
    "AlmostPrimalInfeasible": INFEASIBLE,
    "AlmostDualInfeasible": INFEASIBLE,
}


def solve(spec: SubproblemSpec, settings: dict | None = None) -> SubproblemSolution:
    """Solve the canonical QP with Clarabel and unpack the physical solution."""
    s = clarabel.DefaultSettings()
    s.verbose = False
    s.max_iter = 200
    for key, val in (settings or {}).items():
        setattr(s, key, val)
    cones = [clarabel.ZeroConeT(spec.n_eq), clarabel.NonnegativeConeT(spec.n_ineq)]
    cones += [clarabel.SecondOrderConeT(4)] * spec.n_soc
    P = sp.triu(spec.P).tocsc()
    try:
        res = clarabel.DefaultSolver(P, spec.q, spec.A, spec.b, cones, s).solve()
    except Exception as exc:  # solver-internal failure (e.g. factorization)
        log.warning("clarabel raised: %s", exc)
        return SubproblemSolution(None, None, None, np.inf, np.inf, np.inf, NUMERICAL_FAILURE)
    status = _STATUS.get(str(res.status), NUMERICAL_FAILURE)
    if status not in (OPTIMAL, NEAR_OPTIMAL):
        return SubproblemSolution(None, None, None, np.inf, np.inf, np.inf, status,
                                  res.iterations, res.solve_time)
    z = np.asarray(res.x)
    return unpack(spec, z, status, res.iterations, res.solve_time)


def unpack(spec: SubproblemSpec, z, status: str = OPTIMAL, iterations: int = 0,
           solve_time: float = 0.0) -> SubproblemSolution:
    lay, sc = spec.layout, spec.data.scaling
    N, nx, nu = spec.N, spec.nx, spec.nu
    X = z[lay["X"]].reshape(N, nx) * sc.x
    U = z[lay["U"]].reshape(N, nu) * sc.u
    T = float(z[lay["T"]][0] * sc.T)
    nup = z[lay["nup"]].reshape(N - 1, nx)
    nun = z[lay["nun"]].reshape(N - 1, nx)
    nus = z[lay["nus"]]
    return SubproblemSolution(
        trajectory=Trajectory(X, U, T),
        nu=nup - nun,
        nu_s=nus,
        nu_norm=float(np.sum(np.abs(nup - nun))),
        nus_norm=float(np.sum(np.abs(nus))),
        objective_L=spec.objective(z),
        solver_status=status,
        iterations=iterations,
        solve_time=solve_time,
    )


def convex_data(sc, lam: float, scaling: Scaling | None = None) -> ConvexData:
    """Bounds and boundary data for a quadrotor :class:`~commtraj.problem.Scenario`."""
    from .problem import default_scaling

    p = sc.quad
    inf = np.inf
    x_lower = np.full(12, -inf)
    x_upper = np.full(12, inf)
    x_lower[6], x_upper[6] = -p.phi_max, p.phi_max
    x_lower[7], x_upper[7] = -p.theta_max, p.theta_max
    if sc.z_min is not None:
        x_lower[2] = sc.z_min
    tmax = np.asarray(p.torque_max)
    bounds = Bounds(x_lower, x_upper, np.r_[0.0, -tmax], np.r_[p.u1_max, tmax], sc.T_min, sc.T_max)
    return ConvexData(sc.x_start, sc.x_goal, bounds, scaling or default_scaling(sc), lam, sc.channel.r_gs)

