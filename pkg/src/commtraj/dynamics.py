"""Rigid-body quadrotor model: equations of motion and their Jacobians.

State layout (12): ``r`` (0:3, Earth frame), ``v`` (3:6, Earth frame),
``eta`` = (roll, pitch, yaw) (6:9), ``omega`` body rates (9:12).
Control layout (4): total thrust ``F`` along body +z, then body torques.

Euler angles follow the Z-Y-X (yaw-pitch-roll) convention. All functions
broadcast over leading batch dimensions, so ``x`` may be ``(12,)`` or
``(K, 12)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NX = 12
NU = 4

POS = slice(0, 3)
VEL = slice(3, 6)
ATT = slice(6, 9)
RATE = slice(9, 12)

G0 = 9.80665


class SingularAttitudeError(ValueError):
    """Pitch reached the Euler-rate singularity (|cos(theta)| ~ 0)."""


@dataclass(frozen=True)
class QuadrotorParams:
    mass: float = 3.0
    inertia: tuple[float, float, float] = (0.04, 0.04, 0.08)
    arm_length: float = 0.3
    g: float = G0
    phi_max: float = float(np.deg2rad(35.0))
    theta_max: float = float(np.deg2rad(35.0))
    u1_max: float | None = None  # defaults to 2.5 m g
    torque_max: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.u1_max is None:
            object.__setattr__(self, "u1_max", 2.5 * self.mass * self.g)
        object.__setattr__(self, "inertia", tuple(float(j) for j in self.inertia))
        object.__setattr__(self, "torque_max", tuple(float(t) for t in self.torque_max))
        self.validate()

    def validate(self) -> None:
        if not self.mass > 0:
            raise ValueError("mass must be positive")
        if len(self.inertia) != 3 or not all(j > 0 for j in self.inertia):
            raise ValueError("inertia must be three positive principal moments")
        if not self.arm_length > 0:
            raise ValueError("arm_length must be positive")
        if not self.g > 0:
            raise ValueError("g must be positive")
        for name in ("phi_max", "theta_max"):
            val = getattr(self, name)
            if not 0 < val < np.pi / 2:
                raise ValueError(f"{name} must lie in (0, pi/2)")
        if not self.u1_max > self.mass * self.g:
            raise ValueError("u1_max must exceed the hover thrust m*g")
        if len(self.torque_max) != 3 or not all(t > 0 for t in self.torque_max):
            raise ValueError("torque_max must be three positive bounds")

    @property
    def hover_thrust(self) -> float:
        return self.mass * self.g

    @property
    def J(self) -> np.ndarray:
        return np.asarray(self.inertia)

    def hover_control(self) -> np.ndarray:
        return np.array([self.hover_thrust, 0.0, 0.0, 0.0])


def _trig(eta):
    eta = np.asarray(eta, dtype=float)
    return np.cos(eta[..., 0]), np.sin(eta[..., 0]), np.cos(eta[..., 1]), \
        np.sin(eta[..., 1]), np.cos(eta[..., 2]), np.sin(eta[..., 2])


def euler_to_rotation(eta) -> np.ndarray:
    """Body-to-Earth rotation ``Rz(psi) @ Ry(theta) @ Rx(phi)``."""
    cf, sf, ct, st, cp, sp = _trig(eta)
    R = np.empty(np.shape(eta)[:-1] + (3, 3))
    R[..., 0, 0] = ct * cp
    R[..., 0, 1] = sf * st * cp - cf * sp
    R[..., 0, 2] = cf * st * cp + sf * sp
    R[..., 1, 0] = ct * sp
    R[..., 1, 1] = sf * st * sp + cf * cp
    R[..., 1, 2] = cf * st * sp - sf * cp
    R[..., 2, 0] = -st
    R[..., 2, 1] = sf * ct
    R[..., 2, 2] = cf * ct
    return R


def _check_pitch(ct):
    if np.any(np.abs(ct) < 1e-9):
        raise SingularAttitudeError("pitch at +-90 deg: Euler-rate map is singular")


def euler_rate_matrix(eta) -> np.ndarray:
    """Matrix W with ``eta_dot = W(eta) @ omega``."""
    cf, sf, ct, st, _, _ = _trig(eta)
    _check_pitch(ct)
    tt = st / ct
    W = np.zeros(np.shape(eta)[:-1] + (3, 3))
    W[..., 0, 0] = 1.0
    W[..., 0, 1] = sf * tt
    W[..., 0, 2] = cf * tt
    W[..., 1, 1] = cf
    W[..., 1, 2] = -sf
    W[..., 2, 1] = sf / ct
    W[..., 2, 2] = cf / ct
    return W


def _gyro(omega, J):
    # omega x (J omega) for diagonal J
    Jx, Jy, Jz = J
    wx, wy, wz = omega[..., 0], omega[..., 1], omega[..., 2]
    return np.stack([(Jz - Jy) * wy * wz, (Jx - Jz) * wz * wx, (Jy - Jx) * wx * wy], axis=-1)


def dynamics_rhs(x, u, p: QuadrotorParams) -> np.ndarray:
    """Time derivative of the state under control ``u``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    eta = x[..., ATT]
    omega = x[..., RATE]
    cf, sf, ct, st, cp, sp = _trig(eta)
    _check_pitch(ct)
    F = u[..., 0]
    thrust_dir = np.stack([cf * st * cp + sf * sp, cf * st * sp - sf * cp, cf * ct], axis=-1)
    dx = np.empty(np.broadcast_shapes(x.shape[:-1], u.shape[:-1]) + (NX,))
    dx[..., POS] = x[..., VEL]
    dx[..., VEL] = (F / p.mass)[..., None] * thrust_dir
    dx[..., 5] -= p.g
    dx[..., ATT] = np.einsum("...ij,...j->...i", euler_rate_matrix(eta), omega)
    dx[..., RATE] = (u[..., 1:] - _gyro(omega, p.inertia)) / p.J
    return dx


def dynamics_jacobians(x, u, p: QuadrotorParams) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form ``(df/dx, df/du)``, shapes ``(..., 12, 12)`` and ``(..., 12, 4)``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
    cf, sf, ct, st, cp, sp = _trig(x[..., ATT])
    _check_pitch(ct)
    wx, wy, wz = x[..., 9], x[..., 10], x[..., 11]
    F_m = u[..., 0] / p.mass
    Jx, Jy, Jz = p.inertia

    A = np.zeros(batch + (NX, NX))
    B = np.zeros(batch + (NX, NU))
    A[..., 0, 3] = A[..., 1, 4] = A[..., 2, 5] = 1.0

    # acceleration w.r.t. roll, pitch, yaw
    d_phi = np.stack([-sf * st * cp + cf * sp, -sf * st * sp - cf * cp, -sf * ct], axis=-1)
    d_theta = np.stack([cf * ct * cp, cf * ct * sp, -cf * st], axis=-1)
    d_psi = np.stack([-cf * st * sp + sf * cp, cf * st * cp + sf * sp, np.zeros_like(cf)], axis=-1)
    A[..., 3:6, 6] = F_m[..., None] * d_phi
    A[..., 3:6, 7] = F_m[..., None] * d_theta
    A[..., 3:6, 8] = F_m[..., None] * d_psi

    # Euler-angle kinematics
    tt = st / ct
    a = sf * wy + cf * wz
    b = cf * wy - sf * wz
    A[..., 6, 6] = tt * b
    A[..., 7, 6] = -a
    A[..., 8, 6] = b / ct
    A[..., 6, 7] = a / ct**2
    A[..., 8, 7] = a * st / ct**2
    A[..., 6:9, 9:12] = euler_rate_matrix(x[..., ATT])

    # gyroscopic coupling
    A[..., 9, 10] = -(Jz - Jy) * wz / Jx
    A[..., 9, 11] = -(Jz - Jy) * wy / Jx
    A[..., 10, 9] = -(Jx - Jz) * wz / Jy
    A[..., 10, 11] = -(Jx - Jz) * wx / Jy
    A[..., 11, 9] = -(Jy - Jx) * wy / Jz
    A[..., 11, 10] = -(Jy - Jx) * wx / Jz

    B[..., 3:6, 0] = np.stack([cf * st * cp + sf * sp, cf * st * sp - sf * cp, cf * ct], axis=-1) / p.mass
    B[..., 9, 1] = 1.0 / Jx
    B[..., 10, 2] = 1.0 / Jy
    B[..., 11, 3] = 1.0 / Jz
    return A, B


def hover_state(position) -> np.ndarray:
    x = np.zeros(NX)
    x[POS] = position
    return x


def is_admissible(x, p: QuadrotorParams, tol: float = 1e-9) -> bool:
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        return False
    return bool(np.all(np.abs(x[..., 6]) <= p.phi_max + tol) and np.all(np.abs(x[..., 7]) <= p.theta_max + tol))
