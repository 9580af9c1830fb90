import numpy as np
import pytest

from commtraj import channel
from commtraj.channel import (ChannelParams, CoincidentPositionError, cumulative_throughput, elevation_angle_deg,
                              expected_rate, megabytes_to_bits, p_dir, p_dir_eff, rate_gradient, rate_partials,
                              throughput)


def test_elevation_angles(chan):
    assert elevation_angle_deg([200, 400, 100], chan) == pytest.approx(90.0)
    assert elevation_angle_deg([300, 400, 100], chan) == pytest.approx(45.0)
    assert elevation_angle_deg([200, 400, -100], chan) == pytest.approx(-90.0)
    with pytest.raises(CoincidentPositionError):
        elevation_angle_deg([200, 400, 0], chan)


def test_p_dir_values(chan):
    assert abs(p_dir(10.0, chan) - 1.0 / 11.0) <= 1e-12
    assert p_dir(90.0, chan) == pytest.approx(1.0 - 10.0 * np.exp(-48.0), abs=1e-18)
    assert p_dir(50.0, chan) > p_dir(40.0, chan)


def test_p_dir_eff_values(chan):
    assert p_dir_eff(10.0, chan) == pytest.approx(0.2 + 0.8 / 11.0, abs=1e-15)
    assert p_dir_eff(-90.0, chan) == pytest.approx(0.2, abs=1e-6)
    assert p_dir_eff(-90.0, chan) >= 0.2


def test_rate_at_unit_distance_with_full_los(chan):
    # overhead at 1 m the effective LoS probability is 1 - 3.5e-20, i.e. 1.0 in doubles
    r = chan.r_gs + [0.0, 0.0, 1.0]
    assert p_dir_eff(elevation_angle_deg(r, chan), chan) == 1.0
    ref = 1e6 * np.log2(61.0)
    assert abs(expected_rate(r, chan) - ref) / ref <= 1e-9


def test_rate_unit_value_from_formula(chan):
    # independent evaluation of w log2(1 + b pbar / d^beta) at an oblique point
    r = np.array([230.0, 440.0, 25.0])
    d = np.linalg.norm(r - chan.r_gs)
    alpha = np.degrees(np.arcsin(25.0 / d))
    pbar = 0.2 + 0.8 / (1 + 10 * np.exp(-0.6 * (alpha - 10)))
    ref = 1e6 * np.log2(1 + 60 * pbar / d**2.3)
    assert expected_rate(r, chan) == pytest.approx(ref, rel=1e-13)


def test_rate_decays_with_distance(chan):
    direction = np.array([1.0, 1.0, 1.0]) / np.sqrt(3)
    near = expected_rate(chan.r_gs + 50 * direction, chan)
    far = expected_rate(chan.r_gs + 100 * direction, chan)
    assert far < near
    assert 0 < expected_rate(chan.r_gs + 1e6 * direction, chan) < 1e-3


def test_rate_refuses_min_separation(chan):
    with pytest.raises(CoincidentPositionError):
        expected_rate(chan.r_gs + [0.5, 0, 0], chan)


def test_throughput_values(chan):
    pos = np.tile(chan.r_gs + [30.0, 0, 40.0], (5, 1))
    c = expected_rate(pos[0], chan)
    assert throughput(pos, 250.0, chan) == pytest.approx(c * 250.0)
    assert throughput(pos, 0.0, chan) == 0.0


def test_two_node_trapezoid_by_hand(chan, monkeypatch):
    monkeypatch.setattr(channel, "expected_rate", lambda pos, cp: np.array([2e6, 4e6]))
    assert channel.throughput(np.zeros((2, 3)), 100.0, chan) == pytest.approx(3e8)


def test_cumulative_ends_at_total(chan, rng):
    pos = chan.r_gs + rng.uniform(5, 300, (40, 3))
    cum = cumulative_throughput(pos, 321.0, chan)
    assert cum[0] == 0.0
    assert np.all(np.diff(cum) >= 0)
    assert cum[-1] == pytest.approx(throughput(pos, 321.0, chan), rel=1e-12)


def test_megabytes_are_decimal():
    assert megabytes_to_bits(30) == 2.4e8


def test_gradient_symmetric_on_axis(chan):
    g = rate_gradient(chan.r_gs + [0, 0, 60.0], chan)
    assert abs(g[0]) <= 1e-12 and abs(g[1]) <= 1e-12
    assert g[2] < 0


def test_radial_derivative_negative_beyond_knee(chan):
    # fixed altitude 20 m; at 200 m horizontal the elevation is ~5.7 deg, below the knee
    # and at 40 m it is ~27 deg, above the knee where distance loss dominates
    r = chan.r_gs + [40.0, 0, 20.0]
    g = rate_gradient(r, chan)
    assert g[0] < 0


def test_gradient_matches_central_differences(chan, rng):
    worst = 0.0
    for _ in range(100):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        r = chan.r_gs + rng.uniform(5, 1000) * direction
        g = rate_gradient(r, chan)
        num = np.empty(3)
        for i in range(3):
            h = 1e-6 * max(1.0, abs(r[i]))
            e = np.zeros(3)
            e[i] = h
            num[i] = (expected_rate(r + e, chan) - expected_rate(r - e, chan)) / (2 * h)
        worst = max(worst, np.abs(g - num).max() / np.abs(num).max())
    assert worst <= 1e-5


def test_partials_recombine(chan, rng):
    r = chan.r_gs + rng.uniform(-200, 200, (20, 3))
    r[:, 2] = np.abs(r[:, 2]) + 5
    d_dist, d_elev = rate_partials(r, chan)
    off = r - chan.r_gs
    dist = np.linalg.norm(off, axis=1)
    assert np.allclose((d_dist / dist)[:, None] * off + d_elev, rate_gradient(r, chan))
    assert np.all(d_dist < 0)
    # the elevation part is orthogonal to the line of sight
    assert np.abs(np.sum(d_elev * off, axis=1)).max() <= 1e-9 * np.abs(d_elev).max() * dist.max()


@pytest.mark.parametrize("kwargs", [{"a1": 0}, {"a2": -1}, {"zeta": 1.0}, {"zeta": 0.0},
                                    {"beta": 0}, {"b": 0}, {"bandwidth": -5}])
def test_params_reject_invalid(kwargs):
    with pytest.raises(ValueError):
        ChannelParams(**kwargs)
