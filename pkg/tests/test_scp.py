import numpy as np
import pytest

from commtraj.discretize import defects
from commtraj.problem import Scenario, Trajectory, default_scaling, energy_cost, initial_guess
from commtraj.scp import (CONVERGED, MAX_ITERS, ScpConfig, acceptance_ratio, close_defects, cost_breakdown,
                          penalized_cost, run, trust_update)


@pytest.fixture
def cfg():
    return ScpConfig()


class TestConfig:
    @pytest.mark.parametrize("kw", [
        dict(rho0=0.3),            # not below rho1
        dict(rho2=1.0),
        dict(alpha=1.0),
        dict(lam=0.0),
        dict(eps=0.0),
        dict(iter_max=0),
        dict(trust_init=100.0),    # above trust_max
        dict(trust_min=0.0),
        dict(max_rejections=0),
        dict(feas_tol=-1.0),
    ])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ScpConfig(**kw)


class TestAcceptance:
    def test_ratio(self):
        # actual 1, predicted 2
        assert acceptance_ratio(10.0, 9.0, 8.0) == pytest.approx(0.5)
        assert acceptance_ratio(10.0, 11.0, 8.0) == pytest.approx(-0.5)

    def test_zero_prediction(self):
        with pytest.raises(ZeroDivisionError):
            acceptance_ratio(1.0, 0.5, 1.0)

    @pytest.mark.parametrize("rho, trust, expected", [
        (-1.0, 1.0, (0.5, False)),
        (0.005, 1.0, (0.5, False)),
        (0.1, 1.0, (0.5, True)),
        (0.5, 1.0, (1.0, True)),
        (0.9, 1.0, (2.0, True)),
        (0.9, 64.0, (64.0, True)),     # capped
        (-1.0, 1e-4, (1e-4, False)),   # floored
    ])
    def test_trust_update(self, cfg, rho, trust, expected):
        assert trust_update(rho, trust, cfg) == expected


def hover_scenario(**kw):
    base = dict(x_start=[50.0, 50.0, 20.0], x_goal=[50.0, 50.0, 20.0], N=30, T_guess=60.0, T_min=10.0)
    base.update(kw)
    return Scenario(**base)


class TestPenalizedCost:
    def test_hover_at_guess_time_is_one(self):
        sc = hover_scenario()
        # energy is normalized by hover energy over T_guess
        assert penalized_cost(initial_guess(sc), sc, 1e3) == pytest.approx(1.0, rel=1e-10)

    def test_throughput_shortfall(self):
        sc = hover_scenario(q_min=1e12)
        g = initial_guess(sc)
        s = default_scaling(sc)
        c = cost_breakdown(g, sc, 1e3, s)
        from commtraj import channel
        short = (1e12 - channel.throughput(g.positions, g.T, sc.channel)) / s.throughput
        assert c.violation == pytest.approx(short)
        assert c.defect == pytest.approx(0.0, abs=1e-14)
        assert c.total == pytest.approx(c.energy + 1e3 * short)

    def test_defects_are_penalized(self):
        sc = hover_scenario()
        g = initial_guess(sc)
        g.X[5, 0] += 1.0
        s = default_scaling(sc)
        c = cost_breakdown(g, sc, 1e3, s)
        assert c.defect > 0
        assert c.total > 1.0


class TestCloseDefects:
    def test_removes_injected_defects(self):
        sc = hover_scenario()
        g = initial_guess(sc)
        g.X[10, :3] += [0.05, -0.02, 0.03]
        g.X[11, 3] += 0.01
        s = default_scaling(sc)
        fixed, err = close_defects(g, sc, s)
        assert err <= 1e-12
        assert np.max(np.abs(defects(fixed, sc.quad) / s.x)) <= 1e-12
        assert np.allclose(fixed.X[0], sc.x_start, atol=1e-12) and np.allclose(fixed.X[-1], sc.x_goal, atol=1e-12)
        assert np.array_equal(fixed.U[-1], fixed.U[-2]) or np.allclose(fixed.U[-1], fixed.U[-2], atol=1e-12)
        assert fixed.T == g.T
        # the correction is of the size of the defect, not of the trajectory
        assert np.max(np.abs(fixed.X - g.X)) < 0.2

    def test_feasible_input_untouched(self):
        sc = hover_scenario()
        g = initial_guess(sc)
        fixed, err = close_defects(g, sc, default_scaling(sc))
        assert err <= 1e-12
        assert np.array_equal(fixed.X, g.X)


class TestRun:
    def test_hover_converges_to_minimum_time(self):
        sc = hover_scenario(N=40)
        res = run(sc)
        assert res.status == CONVERGED
        mg = sc.quad.hover_thrust
        assert np.max(np.abs(res.trajectory.U[1:-1, 0] / mg - 1)) <= 0.01
        assert res.T == pytest.approx(sc.T_min, rel=0.01)
        assert res.J_hat == pytest.approx(energy_cost(res.trajectory) / default_scaling(sc).energy, rel=1e-9)

    def test_iteration_limit(self):
        sc = Scenario(x_start=[0.0, 0.0, 10.0], x_goal=[60.0, 0.0, 10.0], N=15, T_guess=30.0)
        res = run(sc, ScpConfig(iter_max=1))
        assert res.status == MAX_ITERS
        assert len(res.log) == 1

    def test_log_invariants_on_transfer(self):
        sc = Scenario(x_start=[0.0, 0.0, 10.0], x_goal=[80.0, 40.0, 20.0], N=20, T_guess=40.0)
        cfg = ScpConfig(iter_max=100)
        seen = []
        res = run(sc, cfg, callback=seen.append)
        assert seen == res.log
        assert res.status == CONVERGED
        accepted = [r.J_hat_ref for r in res.log] + [res.log[-1].J_hat_ref]
        for r in res.log:
            if r.L_star is not None:
                assert r.J_hat_ref - r.L_star >= -1e-9
            if r.J_hat_star is not None and not r.accepted:
                assert r.trust_next == pytest.approx(r.trust / cfg.alpha, rel=1e-12)
        assert all(b <= a + 1e-9 for a, b in zip(accepted, accepted[1:]))
        last = res.log[-1]
        assert last.nu_norm <= 1e-6 and last.nus_norm <= 1e-6 and last.gap <= cfg.eps
        assert res.trajectory.X[0] == pytest.approx(sc.x_start)

    def test_guess_is_not_modified(self):
        sc = hover_scenario(N=10)
        g = initial_guess(sc)
        g.U[-1, 0] += 1.0
        before = g.U.copy()
        run(sc, ScpConfig(iter_max=2), guess=g)
        assert np.array_equal(g.U, before)


def test_trajectory_shape_checks():
    with pytest.raises(ValueError):
        Trajectory(np.zeros((3, 12)), np.zeros((4, 4)), 1.0)
    with pytest.raises(ValueError):
        Trajectory(np.zeros((1, 12)), np.zeros((1, 4)), 1.0)
