"""Normalized free-final-time problem: data, initial guess, cost, constraints.

Time is normalized to ``tau in [0, 1]`` with ``t = T * tau`` on ``N`` uniform
nodes. Nonconvex constraints are kept in ``s <= 0`` form: one row per
(obstacle, sample) pair, one row per sample for the ground-station standoff
sphere, and a single scalar row for cumulative throughput.

Samples are the nodes themselves when ``Scenario.substeps == 1``. With
``substeps = M > 1`` they are the held-control flow at ``M`` equally spaced
points per segment, so that the path between nodes is constrained too and
throughput is integrated on the same grid an open-loop audit uses.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import channel
from .channel import ChannelParams
from .discretize import trapz_weights, zoh_weights
from .dynamics import NU, NX, QuadrotorParams, hover_state, is_admissible


TRUST_LENGTH_FRACTION = 0.2
TRUST_TIME_FRACTION = 0.1


class InvalidScenarioError(ValueError):
    pass


class DegenerateReferenceError(ValueError):
    pass


@dataclass(frozen=True)
class Obstacle:
    """Infinite vertical cylinder, keep-out in the horizontal plane."""
    center: tuple[float, float]
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        if len(self.center) != 2:
            raise InvalidScenarioError("obstacle center must be (x, y)")
        if not self.radius > 0:
            raise InvalidScenarioError("obstacle safe radius must be positive")

    def margin(self, positions) -> np.ndarray:
        """Horizontal distance minus safe radius (>= 0 is clear)."""
        p = np.asarray(positions, dtype=float)
        return np.hypot(p[..., 0] - self.center[0], p[..., 1] - self.center[1]) - self.radius


@dataclass
class Trajectory:
    X: np.ndarray  # (N, 12)
    U: np.ndarray  # (N, 4)
    T: float

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.U = np.asarray(self.U, dtype=float)
        self.T = float(self.T)
        if self.X.ndim != 2 or self.U.ndim != 2 or self.X.shape[0] != self.U.shape[0]:
            raise ValueError("X and U must be (N, nx) and (N, nu) with matching N")
        if self.X.shape[0] < 2:
            raise ValueError("trajectory needs at least two nodes")

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def tau(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.N)

    @property
    def t(self) -> np.ndarray:
        return self.T * self.tau

    @property
    def positions(self) -> np.ndarray:
        return self.X[:, :3]

    def copy(self) -> "Trajectory":
        return Trajectory(self.X.copy(), self.U.copy(), self.T)


@dataclass
class Scenario:
    x_start: np.ndarray
    x_goal: np.ndarray
    quad: QuadrotorParams = field(default_factory=QuadrotorParams)
    channel: ChannelParams = field(default_factory=ChannelParams)
    obstacles: list[Obstacle] = field(default_factory=list)
    q_min: float = 0.0  # bits
    N: int = 100
    T_guess: float = 400.0
    T_min: float = 10.0
    T_max: float = 2000.0
    z_min: float | None = None  # altitude floor, m
    gs_standoff: float | None = None  # keep-out radius around the ground station, m
    substeps: int = 1  # constraint samples per segment
    name: str = "scenario"

    def __post_init__(self):
        self.x_start = np.asarray(self.x_start, dtype=float)
        self.x_goal = np.asarray(self.x_goal, dtype=float)
        if self.x_start.shape == (3,):
            self.x_start = hover_state(self.x_start)
        if self.x_goal.shape == (3,):
            self.x_goal = hover_state(self.x_goal)
        self.obstacles = list(self.obstacles)
        self.validate()

    def validate(self) -> None:
        if self.x_start.shape != (NX,) or self.x_goal.shape != (NX,):
            raise InvalidScenarioError("start/goal must be 12-vectors (or 3-vector positions)")
        if self.N < 2:
            raise InvalidScenarioError("N must be at least 2")
        if int(self.substeps) != self.substeps or self.substeps < 1:
            raise InvalidScenarioError("substeps must be a positive integer")
        if not 0 < self.T_min <= self.T_guess <= self.T_max:
            raise InvalidScenarioError("require 0 < T_min <= T_guess <= T_max")
        if self.q_min < 0:
            raise InvalidScenarioError("q_min must be nonnegative")
        for name, x in (("x_start", self.x_start), ("x_goal", self.x_goal)):
            if not is_admissible(x, self.quad):
                raise InvalidScenarioError(f"{name} violates attitude limits or is not finite")
            for j, ob in enumerate(self.obstacles):
                if ob.margin(x[:3]) < 0:
                    raise InvalidScenarioError(f"{name} lies inside obstacle {j}")
            if self.z_min is not None and x[2] < self.z_min:
                raise InvalidScenarioError(f"{name} lies below z_min")
            if self.gs_standoff is not None and np.linalg.norm(x[:3] - self.channel.r_gs) < self.gs_standoff:
                raise InvalidScenarioError(f"{name} lies inside the ground-station standoff sphere")
        if self.gs_standoff is not None and not self.gs_standoff >= channel.MIN_SEPARATION:
            raise InvalidScenarioError(f"gs_standoff must be at least {channel.MIN_SEPARATION} m")


def initial_guess(sc: Scenario) -> Trajectory:
    """Straight-line state interpolation with hover thrust at every node."""
    sc.validate()
    tau = np.linspace(0.0, 1.0, sc.N)[:, None]
    X = (1.0 - tau) * sc.x_start + tau * sc.x_goal
    X[0] = sc.x_start
    X[-1] = sc.x_goal
    u_hover = sc.quad.hover_control()
    U = (1.0 - tau) * u_hover + tau * u_hover
    return Trajectory(X, U, sc.T_guess)


def energy_cost(traj: Trajectory) -> float:
    """``T * integral of u.u`` for the held controls, i.e. ``T * sum_k<N-1 dtau u_k.u_k``.

    For a constant wrench this equals the nodal trapezoid value.
    """
    return float(traj.T * zoh_weights(traj.N) @ np.sum(traj.U**2, axis=1))


@dataclass
class Scaling:
    """Per-component divisors that bring decision variables to O(1)."""
    x: np.ndarray
    u: np.ndarray
    T: float
    energy: float
    length: float
    throughput: float
    # trust-region weights; default to the variable scales
    trust_x: np.ndarray | None = None
    trust_u: np.ndarray | None = None
    trust_T: float | None = None

    def trust_weights(self) -> tuple[np.ndarray, np.ndarray, float]:
        return (self.x if self.trust_x is None else self.trust_x,
                self.u if self.trust_u is None else self.trust_u,
                self.T if self.trust_T is None else self.trust_T)


def default_scaling(sc: Scenario) -> Scaling:
    p = sc.quad
    length = max(float(np.linalg.norm(sc.x_goal[:3] - sc.x_start[:3])), 1.0)
    dt = sc.T_guess / (sc.N - 1)
    att = min(p.phi_max, p.theta_max)
    vel = max(length / sc.T_guess, p.g * np.tan(att) * dt)
    rate = att / dt
    x = np.r_[[length] * 3, [vel] * 3, [att] * 3, [rate] * 3]
    # torque that swings the attitude across its limit within one segment
    torque = np.minimum(p.J * att / dt**2, np.asarray(p.torque_max))
    u = np.r_[p.hover_thrust, torque]
    # positions may move a fifth of the mission length per unit trust radius;
    # the far-field throughput gradient is too weak to pull nodes otherwise
    trust_x = x.copy()
    trust_x[:3] = TRUST_LENGTH_FRACTION * length
    # and T a tenth of its guess: stretching time is otherwise the cheapest
    # way to buy throughput early on, and shrinking it again is slow
    return Scaling(
        x=x,
        u=u,
        T=sc.T_guess,
        energy=p.hover_thrust**2 * sc.T_guess,
        length=length,
        throughput=max(sc.q_min, channel.BITS_PER_MEGABYTE),
        trust_x=trust_x,
        trust_T=TRUST_TIME_FRACTION * sc.T_guess,
    )


def standoff_residuals(traj: Trajectory, sc: Scenario) -> np.ndarray:
    """``gs_standoff - |r_k - r_gs|`` per node, empty when no standoff is set."""
    if sc.gs_standoff is None:
        return np.zeros(0)
    return sc.gs_standoff - np.linalg.norm(traj.positions - sc.channel.r_gs, axis=1)


def nonconvex_residuals(traj: Trajectory, sc: Scenario) -> tuple[np.ndarray, float]:
    """Obstacle residuals ``(n_obs, N)`` and throughput residual, ``<= 0`` feasible."""
    obs = np.array([-ob.margin(traj.positions) for ob in sc.obstacles]).reshape(len(sc.obstacles), traj.N)
    q = channel.throughput(traj.positions, traj.T, sc.channel) if sc.q_min > 0 else 0.0
    return obs, sc.q_min - q


@dataclass
class NonconvexModel:
    """Affine models ``s(X, U, T) ~ Cx.X + Du.U + G T + residue`` of all rows.

    ``scale`` normalizes each row before penalization and ``weight`` is its
    trapezoid weight in the penalized cost. Rows flagged ``hard`` (standoff
    and the between-node box bounds) have their slack capped at the
    reference violation, so in the model a satisfied row stays satisfied
    and a violated one cannot get worse. The standoff model is also
    conservative (``s <= model``).

    The throughput row depends on sample positions partly through the slant
    distances ``d_i`` to the ground station. Those enter through ``Cd``
    acting on auxiliary variables with ``d_i >= |r_i - r_gs|`` (a second-order
    cone), which keeps that part of the model exact in direction and
    conservative in magnitude.
    """
    Cx: sp.csr_matrix       # (m, N*nx)
    Du: sp.csr_matrix       # (m, N*nu)
    G: np.ndarray           # (m,)
    residue: np.ndarray     # (m,)
    value: np.ndarray       # (m,) exact s at the reference
    scale: np.ndarray
    weight: np.ndarray
    labels: list[str]
    hard: np.ndarray | None = None
    Cd: sp.csr_matrix | None = None   # (m, n_s) on slant distances, or None
    dist_ref: np.ndarray | None = None  # (n_s,) reference slant distances
    # affine sample positions r = pos_map [X; U; T] + pos_offset, for the cones
    pos_map: sp.csr_matrix | None = None
    pos_offset: np.ndarray | None = None

    def __post_init__(self):
        if self.hard is None:
            self.hard = np.zeros(len(self.G), dtype=bool)
        if not ((self.Cd is None) == (self.dist_ref is None) == (self.pos_map is None)
                == (self.pos_offset is None)):
            raise ValueError("Cd, dist_ref, pos_map and pos_offset must be given together")

    @property
    def m(self) -> int:
        return len(self.G)

    @property
    def uses_distance(self) -> bool:
        return self.Cd is not None

    def evaluate(self, X, U, T, dist=None) -> np.ndarray:
        """Model value; ``dist`` defaults to the true slant distances of ``X``."""
        out = self.Cx @ np.ravel(X) + self.Du @ np.ravel(U) + self.G * T + self.residue
        if self.Cd is not None:
            if dist is None:
                raise ValueError("this model needs slant distances")
            out = out + self.Cd @ np.asarray(dist, dtype=float)
        return out

    @staticmethod
    def empty(N: int, nx: int = NX, nu: int = NU) -> "NonconvexModel":
        z = np.zeros(0)
        return NonconvexModel(sp.csr_matrix((0, N * nx)), sp.csr_matrix((0, N * nu)), z, z, z, z, z, [],
                              np.zeros(0, dtype=bool))


def sample_states(traj: Trajectory, sc: Scenario, disc=None) -> np.ndarray:
    """States at the constraint samples, ``(K*M + 1, nx)``.

    ``disc`` must be a discretization of ``traj`` with ``sc.substeps``
    sub-steps whenever that exceeds one.
    """
    if sc.substeps == 1:
        return traj.X
    if disc is None or disc.substeps != sc.substeps:
        raise ValueError(f"need a discretization with {sc.substeps} sub-steps")
    return disc.fine_states()


def sample_positions(traj: Trajectory, sc: Scenario, disc=None) -> np.ndarray:
    """Positions at the constraint samples, ``(K*M + 1, 3)``."""
    return sample_states(traj, sc, disc)[:, :3]


def sample_map(N: int, disc=None, substeps: int = 1, comps=(0, 1, 2),
               interior_only: bool = False) -> tuple[sp.csr_matrix, np.ndarray]:
    """Affine model ``s = P z + off`` of state components at the samples.

    ``z = [X.ravel(), U.ravel(), T]`` and the output is stacked sample-major,
    ``len(comps)`` entries per sample. Node samples select state columns; an
    interior sample at fraction ``s`` of segment ``k`` uses the first-order
    flow ``Phi(s) x_k + B(s) u_k + F(s) T + rho(s)``. With ``interior_only``
    the node samples are dropped.
    """
    comps = np.asarray(comps, dtype=int)
    nc = len(comps)
    nz = N * (NX + NU) + 1
    if substeps == 1:
        if interior_only:
            return sp.csr_matrix((0, nz)), np.zeros(0)
        rows = np.arange(nc * N)
        cols = (np.arange(N)[:, None] * NX + comps).ravel()
        return sp.csr_matrix((np.ones(nc * N), (rows, cols)), shape=(nc * N, nz)), np.zeros(nc * N)
    if disc is None or disc.substeps != substeps:
        raise ValueError(f"need a discretization with {substeps} sub-steps")
    K, M = N - 1, substeps
    idx = np.arange(K * M + 1)
    node = (idx % M == 0)
    idx = idx[~node] if interior_only else idx
    node = node[idx]
    ns = len(idx)
    out = np.arange(ns)     # output sample slot
    rows, cols, vals = [], [], []
    off = np.zeros((ns, nc))
    rc = nc * out[node][:, None] + np.arange(nc)
    rows.append(rc.ravel())
    cols.append(((idx[node] // M)[:, None] * NX + comps).ravel())
    vals.append(np.ones(rc.size))
    k_in, j_in = idx[~node] // M, idx[~node] % M - 1
    A = disc.sub_A[k_in, j_in][:, comps, :]   # (n, nc, nx)
    B = disc.sub_B[k_in, j_in][:, comps, :]   # (n, nc, nu)
    F = disc.sub_F[k_in, j_in][:, comps]      # (n, nc)
    off[~node] = disc.sub_rho[k_in, j_in][:, comps]
    rc = (nc * out[~node][:, None] + np.arange(nc))[:, :, None]
    rows += [np.broadcast_to(rc, A.shape).ravel(), np.broadcast_to(rc, B.shape).ravel(), rc.ravel()]
    cols += [np.broadcast_to((k_in * NX)[:, None, None] + np.arange(NX), A.shape).ravel(),
             np.broadcast_to((N * NX + k_in * NU)[:, None, None] + np.arange(NU), B.shape).ravel(),
             np.full(rc.size, nz - 1)]
    vals += [A.ravel(), B.ravel(), F.ravel()]
    P = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(nc * ns, nz))
    return P, off.ravel()


def position_map(N: int, disc=None, substeps: int = 1) -> tuple[sp.csr_matrix, np.ndarray]:
    """Affine model ``r = P z + off`` of the sample positions, stacked ``(3*n_s,)``."""
    return sample_map(N, disc, substeps, (0, 1, 2))


def _interior_bounds(sc: Scenario) -> list[tuple[int, float, float, str]]:
    """``(state index, sign, limit, name)`` for box bounds enforced between nodes.

    Nodes carry these as plain variable bounds; the interior samples need
    their own rows or a fast manoeuvre can overshoot between nodes.
    """
    if sc.substeps == 1:
        return []
    p = sc.quad
    out = [(6, s, p.phi_max, "roll") for s in (1.0, -1.0)]
    out += [(7, s, p.theta_max, "pitch") for s in (1.0, -1.0)]
    if sc.z_min is not None:
        out.append((2, -1.0, -sc.z_min, "altitude"))
    return out


def constraint_rows(traj: Trajectory, sc: Scenario, scaling: Scaling,
                    disc=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stacked ``(values, scale, weight)`` in the same row order as the linearization."""
    pos = sample_positions(traj, sc, disc)
    ns = pos.shape[0]
    w = trapz_weights(ns)
    n_obs = len(sc.obstacles)
    # keep-out rows are normalized by their own radius, which keeps the
    # penalty per metre of penetration well above the throughput gradient
    values = [np.array([-ob.margin(pos) for ob in sc.obstacles]).reshape(n_obs * ns)]
    scale = [np.repeat([ob.radius for ob in sc.obstacles], ns)]
    weight = [np.tile(w, n_obs)]
    if sc.gs_standoff is not None:
        values.append(sc.gs_standoff - np.linalg.norm(pos - sc.channel.r_gs, axis=1))
        scale.append(np.full(ns, sc.gs_standoff))
        weight.append(w)
    inner = np.flatnonzero(np.arange(ns) % max(sc.substeps, 1) != 0)
    for i, sign, lim, _ in _interior_bounds(sc):
        x = sample_states(traj, sc, disc)[inner, i]
        values.append(sign * x - lim)
        scale.append(np.full(len(inner), max(abs(lim), 1.0)))
        weight.append(w[inner])
    if sc.q_min > 0:
        values.append([sc.q_min - channel.throughput(pos, traj.T, sc.channel)])
        scale.append([scaling.throughput])
        weight.append([1.0])
    return np.concatenate(values), np.concatenate(scale), np.concatenate(weight)


def linearize_nonconvex(ref: Trajectory, sc: Scenario, scaling: Scaling, disc=None) -> NonconvexModel:
    """First-order models of every nonconvex row about ``ref``.

    Rows are built against sample positions and mapped to ``(X, U, T)``
    through :func:`position_map`; ``disc`` (the reference discretization)
    is required when ``sc.substeps > 1``.
    """
    N = ref.N
    P, p_off = position_map(N, disc, sc.substeps)
    pos = sample_positions(ref, sc, disc)
    ns = pos.shape[0]
    rows, cols, vals = [], [], []   # gradients with respect to stacked sample positions
    G, labels = [], []
    r = 0
    for j, ob in enumerate(sc.obstacles):
        dxy = pos[:, :2] - np.asarray(ob.center)
        dist = np.hypot(dxy[:, 0], dxy[:, 1])
        if np.any(dist < 1e-9):
            raise DegenerateReferenceError(f"reference sample at the center of obstacle {j}")
        n = -dxy / dist[:, None]
        rows.append(np.repeat(r + np.arange(ns), 2))
        cols.append((3 * np.arange(ns)[:, None] + np.arange(2)).ravel())
        vals.append(n.ravel())
        G += [0.0] * ns
        labels += [f"obstacle[{j}][{i}]" for i in range(ns)]
        r += ns
    if sc.gs_standoff is not None:
        off = pos - sc.channel.r_gs
        dist = np.linalg.norm(off, axis=1)
        if np.any(dist < 1e-9):
            raise DegenerateReferenceError("reference sample at the ground station")
        rows.append(np.repeat(r + np.arange(ns), 3))
        cols.append(np.arange(3 * ns))
        vals.append((-off / dist[:, None]).ravel())
        G += [0.0] * ns
        labels += [f"standoff[{i}]" for i in range(ns)]
        r += ns
    bound_rows = []     # (row offset, state slot, sign), mapped after the position rows
    comps = sorted({i for i, *_ in _interior_bounds(sc)})
    n_in = ns - len(range(0, ns, max(sc.substeps, 1)))
    for i, sign, _, name in _interior_bounds(sc):
        bound_rows.append((r, comps.index(i), sign))
        G += [0.0] * n_in
        labels += [f"{name}{'+' if sign > 0 else '-'}[{j}]" for j in range(n_in)]
        r += n_in
    Cd = dist_ref = None
    if sc.q_min > 0:
        w = trapz_weights(ns)
        d_dist, d_elev = channel.rate_partials(pos, sc.channel)
        rows.append(np.full(3 * ns, r))
        cols.append(np.arange(3 * ns))
        vals.append((-ref.T * w[:, None] * d_elev).ravel())
        dist_ref = np.linalg.norm(pos - sc.channel.r_gs, axis=1)
        Cd = sp.csr_matrix((-ref.T * w * d_dist, (np.full(ns, r), np.arange(ns))), shape=(r + 1, ns))
        G.append(-float(w @ channel.expected_rate(pos, sc.channel)))
        labels.append("throughput")
        r += 1
    value, scale, weight = constraint_rows(ref, sc, scaling, disc)
    if rows:
        Gp = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(r, 3 * ns))
    else:
        Gp = sp.csr_matrix((r, 3 * ns))
    C = Gp @ P
    if bound_rows:
        S, _ = sample_map(N, disc, sc.substeps, comps, interior_only=True)
        nc = len(comps)
        Sr, Sc, Sv = [], [], []
        for r0, slot, sign in bound_rows:
            Sr.append(r0 + np.arange(n_in))
            Sc.append(nc * np.arange(n_in) + slot)
            Sv.append(np.full(n_in, sign))
        sel = sp.csr_matrix((np.concatenate(Sv), (np.concatenate(Sr), np.concatenate(Sc))), shape=(r, nc * n_in))
        C = C + sel @ S
    C = C.tocsc()
    nX = N * NX
    Cx = C[:, :nX].tocsr()
    Du = C[:, nX:nX + N * NU].tocsr()
    G = np.asarray(G) + C[:, -1].toarray().ravel()
    residue = value - Cx @ ref.X.ravel() - Du @ ref.U.ravel() - G * ref.T
    if Cd is not None:
        residue = residue - Cd @ dist_ref
    hard = np.array([not lab.startswith(("obstacle", "throughput")) for lab in labels], dtype=bool)
    return NonconvexModel(Cx, Du, G, residue, value, scale, weight, labels, hard, Cd, dist_ref,
                          P if Cd is not None else None, p_off if Cd is not None else None)


def lateral_offset_toward_gs(positions, sc: Scenario) -> float:
    """Largest displacement from the straight start-goal line toward the ground station.

    Offsets are measured perpendicular to the line and projected on the
    perpendicular direction from the line to the ground station, so moving
    away from the station counts as negative.
    """
    p = np.asarray(positions, dtype=float)
    a, b = sc.x_start[:3], sc.x_goal[:3]
    axis = b - a
    length = np.linalg.norm(axis)
    if length < 1e-12:
        raise DegenerateReferenceError("start and goal coincide; no straight line to measure from")
    axis = axis / length

    def perp(v):
        v = np.asarray(v, dtype=float) - a
        return v - np.outer(v @ axis, axis) if v.ndim == 2 else v - (v @ axis) * axis

    toward = perp(sc.channel.r_gs)
    norm = np.linalg.norm(toward)
    if norm < 1e-12:
        raise DegenerateReferenceError("ground station lies on the start-goal line")
    return float(np.max(perp(p) @ (toward / norm)))
