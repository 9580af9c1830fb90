"""Urban air-to-ground channel: LoS probability, expected rate, throughput.

The achievable-rate expression used throughout is the expected-gain upper
bound ``w * log2(1 + b * Pbar / d**beta)``; no fading is sampled.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .discretize import trapz, trapz_weights  # noqa: F401

BITS_PER_MEGABYTE = 8.0e6
MIN_SEPARATION = 1.0  # m


class CoincidentPositionError(ValueError):
    pass


@dataclass(frozen=True)
class ChannelParams:
    a1: float = 10.0
    a2: float = 0.6
    zeta: float = 0.2
    beta: float = 2.3
    b: float = 60.0
    bandwidth: float = 1.0e6
    gs_position: tuple[float, float, float] = (200.0, 400.0, 0.0)
    tx_power: float = 5.0  # W; informational, already folded into b

    def __post_init__(self):
        object.__setattr__(self, "gs_position", tuple(float(c) for c in self.gs_position))
        if not self.a1 > 0 or not self.a2 > 0:
            raise ValueError("sigmoid parameters a1, a2 must be positive")
        if not 0 < self.zeta < 1:
            raise ValueError("zeta must lie in (0, 1)")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if not self.b > 0:
            raise ValueError("b must be positive")
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")

    @property
    def r_gs(self) -> np.ndarray:
        return np.asarray(self.gs_position)


def _offset(r_uav, cp: ChannelParams, min_sep: float = 1e-9):
    d = np.asarray(r_uav, dtype=float) - cp.r_gs
    dist = np.linalg.norm(d, axis=-1)
    if np.any(dist < min_sep):
        raise CoincidentPositionError(
            f"UAV within {min_sep:g} m of the ground station (min distance {np.min(dist):.3g} m)")
    return d, dist


def elevation_angle_deg(r_uav, cp: ChannelParams):
    d, dist = _offset(r_uav, cp)
    return np.degrees(np.arcsin(np.clip(d[..., 2] / dist, -1.0, 1.0)))


def p_dir(alpha_deg, cp: ChannelParams):
    return 1.0 / (1.0 + cp.a1 * np.exp(-cp.a2 * (np.asarray(alpha_deg, dtype=float) - cp.a1)))


def p_dir_eff(alpha_deg, cp: ChannelParams):
    return cp.zeta + (1.0 - cp.zeta) * p_dir(alpha_deg, cp)


def expected_rate(r_uav, cp: ChannelParams):
    """Expected achievable rate in bits/s at UAV position(s) ``r_uav``."""
    d, dist = _offset(r_uav, cp, MIN_SEPARATION)
    alpha = np.degrees(np.arcsin(np.clip(d[..., 2] / dist, -1.0, 1.0)))
    snr = cp.b * p_dir_eff(alpha, cp) / dist**cp.beta
    return cp.bandwidth * np.log1p(snr) / np.log(2.0)


def rate_partials(r_uav, cp: ChannelParams):
    """Split the rate gradient into its slant-distance and elevation parts.

    Returns ``(dR_ddist, dR_dr_elev)`` with shapes ``(...)`` and ``(..., 3)``
    such that ``grad R = dR_ddist * (r - r_gs)/dist + dR_dr_elev``. For a
    fixed elevation the rate is convex and decreasing in the distance.

    On the vertical axis through the station the elevation angle has a cone
    point; its horizontal derivative is taken as zero there by symmetry.
    """
    d, dist = _offset(r_uav, cp, MIN_SEPARATION)
    dz = d[..., 2]
    horiz = np.hypot(d[..., 0], d[..., 1])
    alpha = np.degrees(np.arcsin(np.clip(dz / dist, -1.0, 1.0)))
    P = p_dir(alpha, cp)
    pbar = cp.zeta + (1.0 - cp.zeta) * P
    loss = dist ** (-cp.beta)
    snr = cp.b * pbar * loss

    # d alpha / d r = (180/pi) (e3 - dz d / dist^2) / horiz
    e3 = np.zeros_like(d)
    e3[..., 2] = 1.0
    on_axis = horiz < 1e-12 * np.maximum(dist, 1.0)
    safe_h = np.where(on_axis, 1.0, horiz)
    dalpha = np.degrees(1.0) * (e3 - (dz / dist**2)[..., None] * d) / safe_h[..., None]
    dalpha = np.where(on_axis[..., None], 0.0, dalpha)

    gain = cp.bandwidth / (np.log(2.0) * (1.0 + snr))
    dpbar = (1.0 - cp.zeta) * cp.a2 * P * (1.0 - P)
    d_dist = -gain * cp.beta * snr / dist
    d_elev = (gain * cp.b * loss * dpbar)[..., None] * dalpha
    return d_dist, d_elev


def rate_gradient(r_uav, cp: ChannelParams):
    """Gradient of :func:`expected_rate` w.r.t. UAV position, shape ``(..., 3)``."""
    d, dist = _offset(r_uav, cp, MIN_SEPARATION)
    d_dist, d_elev = rate_partials(r_uav, cp)
    return (d_dist / dist)[..., None] * d + d_elev


def throughput(positions, T: float, cp: ChannelParams) -> float:
    """Accumulated bits ``T * trapz(rate)`` along node positions ``(N, 3)``."""
    if T == 0:
        return 0.0
    return T * trapz(expected_rate(positions, cp))


def cumulative_throughput(positions, T: float, cp: ChannelParams) -> np.ndarray:
    """Running trapezoid of the rate, bits delivered up to each node."""
    rate = expected_rate(positions, cp)
    dt = T / (len(rate) - 1)
    return np.concatenate([[0.0], np.cumsum(0.5 * dt * (rate[1:] + rate[:-1]))])


def megabytes_to_bits(mb: float) -> float:
    return mb * BITS_PER_MEGABYTE
