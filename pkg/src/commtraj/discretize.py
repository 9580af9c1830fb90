"""Exact ZOH discretization of the time-scaled linearized dynamics.

For each segment ``[tau_k, tau_k+1]`` the reference is the nonlinear flow from
``x_k`` under the held control ``u_k`` and mission time ``T``. Along it we
co-integrate the transition matrix ``Phi``, its inverse ``Psi`` (from
``Psi' = -Psi A``) and the convolution integrals ``int Psi B``, ``int Psi F``,
``int Psi rho``, which yields

    x_{k+1} = A_k x_k + B_k u_k + F_k T + rho_k.

All segments share the same normalized length, so they are stacked into one
ODE and integrated together.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.integrate import solve_ivp

RTOL = 1e-10
ATOL = 1e-12


class IntegrationError(RuntimeError):
    pass


def trapz_weights(n: int) -> np.ndarray:
    """Trapezoid weights on ``n`` uniform nodes over [0, 1]."""
    if n < 2:
        raise ValueError("trapz needs at least two nodes")
    w = np.full(n, 1.0 / (n - 1))
    w[[0, -1]] *= 0.5
    return w


def zoh_weights(n: int) -> np.ndarray:
    """Weights that integrate a held (ZOH) signal exactly on ``n`` nodes.

    Node k's value acts over segment k; the last node's value acts nowhere.
    """
    if n < 2:
        raise ValueError("need at least two nodes")
    w = np.full(n, 1.0 / (n - 1))
    w[-1] = 0.0
    return w


def trapz(values) -> float:
    """``(dtau/2) * sum(d_k + d_k+1)`` with ``dtau = 1/(N-1)``."""
    values = np.asarray(values, dtype=float)
    return float(trapz_weights(values.shape[0]) @ values)


@dataclass
class LinearizedSegment:
    A: np.ndarray
    B: np.ndarray
    F: np.ndarray
    rho: np.ndarray


@dataclass
class DiscretizedSystem:
    """Stacked segment matrices for a reference ``(X, U, T)``.

    ``x_next[k]`` is the nonlinear flow from ``X[k]`` over segment k, so
    ``defects = X[1:] - x_next``.
    """
    A: np.ndarray      # (K, nx, nx)
    B: np.ndarray      # (K, nx, nu)
    F: np.ndarray      # (K, nx)
    rho: np.ndarray    # (K, nx)
    x_next: np.ndarray  # (K, nx)
    X: np.ndarray
    U: np.ndarray
    T: float
    # the same quantities at the M-1 interior sub-steps of every segment
    sub_A: np.ndarray | None = None    # (K, M-1, nx, nx)
    sub_B: np.ndarray | None = None    # (K, M-1, nx, nu)
    sub_F: np.ndarray | None = None    # (K, M-1, nx)
    sub_rho: np.ndarray | None = None  # (K, M-1, nx)
    sub_x: np.ndarray | None = None    # (K, M-1, nx)

    @property
    def n_segments(self) -> int:
        return self.A.shape[0]

    @property
    def substeps(self) -> int:
        return 1 if self.sub_x is None else self.sub_x.shape[1] + 1

    def fine_states(self) -> np.ndarray:
        """Node states interleaved with the interior flow samples, ``(K*M + 1, nx)``."""
        if self.sub_x is None:
            return self.X.copy()
        K, m1, nx = self.sub_x.shape
        body = np.concatenate([self.X[:-1, None, :], self.sub_x], axis=1).reshape(K * (m1 + 1), nx)
        return np.vstack([body, self.X[-1]])

    @property
    def defects(self) -> np.ndarray:
        return self.X[1:] - self.x_next

    def segment(self, k: int) -> LinearizedSegment:
        return LinearizedSegment(self.A[k], self.B[k], self.F[k], self.rho[k])

    def propagate(self, X, U, T, nu=None) -> np.ndarray:
        """Right-hand side of the difference equation for every segment."""
        X = np.asarray(X)
        out = np.einsum("kij,kj->ki", self.A, X[:-1]) + np.einsum("kij,kj->ki", self.B, U[:-1]) \
            + self.F * T + self.rho
        if nu is not None:
            out = out + nu
        return out


Rhs = Callable[[np.ndarray, np.ndarray], np.ndarray]
Jac = Callable[[np.ndarray, np.ndarray], tuple]


def discretize(X, U, T: float, f: Rhs, jac: Jac, rtol: float = RTOL, atol: float = ATOL,
               substeps: int = 1) -> DiscretizedSystem:
    """Discretize about the reference ``(X, U, T)`` for dynamics ``f``/``jac``.

    ``f(x, u)`` and ``jac(x, u)`` must broadcast over a leading batch axis.
    With ``substeps = M > 1`` the flow and its affine model are also sampled
    at the ``M - 1`` equally spaced interior points of every segment.
    """
    if substeps < 1:
        raise ValueError("substeps must be at least 1")
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float)
    N, nx = X.shape
    nu = U.shape[1]
    K = N - 1
    dtau = 1.0 / K
    Uk = U[:-1]

    sizes = [nx, nx * nx, nx * nx, nx * nu, nx, nx]
    offs = np.cumsum([0] + sizes)
    width = offs[-1]

    eye = np.broadcast_to(np.eye(nx), (K, nx, nx))
    y0 = np.zeros((K, width))
    y0[:, offs[0]:offs[1]] = X[:-1]
    y0[:, offs[1]:offs[2]] = eye.reshape(K, -1)
    y0[:, offs[2]:offs[3]] = eye.reshape(K, -1)

    def rhs(_, y):
        y = y.reshape(K, width)
        x = y[:, offs[0]:offs[1]]
        Phi = y[:, offs[1]:offs[2]].reshape(K, nx, nx)
        Psi = y[:, offs[2]:offs[3]].reshape(K, nx, nx)
        fx = f(x, Uk)
        Ac, Bc = jac(x, Uk)
        Ab = T * Ac
        Bb = T * Bc
        rho = -np.einsum("kij,kj->ki", Ab, x) - np.einsum("kij,kj->ki", Bb, Uk)
        dy = np.empty_like(y)
        dy[:, offs[0]:offs[1]] = T * fx
        dy[:, offs[1]:offs[2]] = (Ab @ Phi).reshape(K, -1)
        dy[:, offs[2]:offs[3]] = -(Psi @ Ab).reshape(K, -1)
        dy[:, offs[3]:offs[4]] = (Psi @ Bb).reshape(K, -1)
        dy[:, offs[4]:offs[5]] = np.einsum("kij,kj->ki", Psi, fx)
        dy[:, offs[5]:offs[6]] = np.einsum("kij,kj->ki", Psi, rho)
        return dy.ravel()

    t_eval = None
    if substeps > 1:
        t_eval = dtau * np.arange(1, substeps + 1) / substeps
        t_eval[-1] = dtau
    sol = solve_ivp(rhs, (0.0, dtau), y0.ravel(), method="DOP853", rtol=rtol, atol=atol, t_eval=t_eval)
    if not sol.success:
        raise IntegrationError(f"segment integration failed: {sol.message}")

    def unpack(y):
        y = y.reshape(K, width)
        Phi = y[:, offs[1]:offs[2]].reshape(K, nx, nx)
        IB = y[:, offs[3]:offs[4]].reshape(K, nx, nu)
        return (y[:, offs[0]:offs[1]].copy(), Phi, Phi @ IB,
                np.einsum("kij,kj->ki", Phi, y[:, offs[4]:offs[5]]),
                np.einsum("kij,kj->ki", Phi, y[:, offs[5]:offs[6]]))

    x_next, A, B, F, rho = unpack(sol.y[:, -1])
    out = DiscretizedSystem(A=A, B=B, F=F, rho=rho, x_next=x_next, X=X.copy(), U=U.copy(), T=float(T))
    if substeps > 1:
        parts = [unpack(sol.y[:, j]) for j in range(substeps - 1)]
        out.sub_x, out.sub_A, out.sub_B, out.sub_F, out.sub_rho = (np.stack(z, axis=1) for z in zip(*parts))
    return out


def flow(X, U, T: float, f: Rhs, rtol: float = RTOL, atol: float = ATOL) -> np.ndarray:
    """Nonlinear ZOH flow of every node over its segment, ``(N-1, nx)``."""
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float)
    K = X.shape[0] - 1
    Uk = U[:-1]
    nx = X.shape[1]

    def rhs(_, y):
        return (T * f(y.reshape(K, nx), Uk)).ravel()

    sol = solve_ivp(rhs, (0.0, 1.0 / K), X[:-1].ravel(), method="DOP853", rtol=rtol, atol=atol)
    if not sol.success:
        raise IntegrationError(f"flow integration failed: {sol.message}")
    return sol.y[:, -1].reshape(K, nx)


def quad_model(p):
    """``(f, jac)`` pair for the quadrotor with parameters ``p``."""
    from .dynamics import dynamics_jacobians, dynamics_rhs

    return (lambda x, u: dynamics_rhs(x, u, p)), (lambda x, u: dynamics_jacobians(x, u, p))


def discretize_trajectory(traj, p, substeps: int = 1) -> DiscretizedSystem:
    f, jac = quad_model(p)
    return discretize(traj.X, traj.U, traj.T, f, jac, substeps=substeps)


def discretize_segment(traj, k: int, p) -> LinearizedSegment:
    """Single-segment view; integrates only segment ``k``."""
    f, jac = quad_model(p)
    n = traj.N - 1
    sub = discretize(traj.X[k:k + 2], traj.U[k:k + 2], traj.T / n, f, jac)
    seg = sub.segment(0)
    # the sub-problem's time parameter is T / n
    seg.F = seg.F / n
    return seg


def defects(traj, p) -> np.ndarray:
    """``x_{k+1}`` minus the nonlinear flow from ``x_k`` under ``u_k``."""
    f, _ = quad_model(p)
    return traj.X[1:] - flow(traj.X, traj.U, traj.T, f)
