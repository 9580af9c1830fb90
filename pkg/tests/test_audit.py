import numpy as np
import pytest

from commtraj.audit import REFINE, AuditTolerances, audit, resimulate
from commtraj.dynamics import SingularAttitudeError, hover_state
from commtraj.problem import Obstacle, Scenario, Trajectory


def hover_traj(sc, T=None):
    X = np.tile(sc.x_start, (sc.N, 1))
    U = np.tile([sc.quad.hover_thrust, 0.0, 0.0, 0.0], (sc.N, 1))
    return Trajectory(X, U, T or sc.T_guess)


def hover_scenario(**kw):
    base = dict(x_start=[30.0, -20.0, 40.0], x_goal=[30.0, -20.0, 40.0], N=12, T_guess=120.0, T_min=10.0)
    base.update(kw)
    return Scenario(**base)


class TestResimulate:
    def test_hover_is_constant(self, quad):
        x0 = hover_state([1.0, 2.0, 50.0])
        U = np.tile([quad.hover_thrust, 0, 0, 0], (9, 1))
        fine = resimulate(U, 500.0, x0, quad)
        assert fine.N == 8 * REFINE + 1
        assert np.max(np.abs(fine.X - x0)) <= 1e-9

    def test_ballistic_drop(self, quad):
        x0 = hover_state([0.0, 0.0, 100.0])
        x0[3:6] = [2.0, -1.0, 0.0]
        T = 3.0
        fine = resimulate(np.zeros((4, 4)), T, x0, quad, refine=5)
        t = fine.t
        g = quad.g
        assert np.allclose(fine.X[:, 2], 100.0 - 0.5 * g * t**2, rtol=0, atol=1e-8)
        assert np.allclose(fine.X[:, 0], 2.0 * t, atol=1e-8)
        assert np.allclose(fine.X[:, 1], -t, atol=1e-8)
        assert np.allclose(fine.X[:, 6:], 0.0, atol=1e-12)

    def test_grid_and_held_controls(self, quad, rng):
        U = np.tile([quad.hover_thrust, 0, 0, 0], (5, 1)) + rng.uniform(-0.01, 0.01, (5, 4))
        fine = resimulate(U, 4.0, hover_state([0, 0, 10.0]), quad, refine=3)
        assert np.allclose(fine.t, np.linspace(0, 4.0, 13))
        assert np.array_equal(fine.U[:3], np.tile(U[0], (3, 1)))
        assert np.array_equal(fine.U[-1], U[-1])

    def test_deterministic(self, quad, rng):
        U = np.tile([quad.hover_thrust, 0, 0, 0], (6, 1)) + rng.uniform(-0.05, 0.05, (6, 4))
        x0 = hover_state([0, 0, 10.0])
        a = resimulate(U, 7.0, x0, quad)
        b = resimulate(U, 7.0, x0, quad)
        assert np.array_equal(a.X, b.X)

    def test_pitch_singularity_reported(self, quad):
        U = np.zeros((3, 4))
        U[:, 2] = quad.torque_max[1]
        with pytest.raises(SingularAttitudeError, match="t ="):
            resimulate(U, 20.0, hover_state([0, 0, 100.0]), quad)

    @pytest.mark.parametrize("T, refine", [(0.0, 10), (-1.0, 10), (1.0, 0)])
    def test_invalid_arguments(self, quad, T, refine):
        with pytest.raises(ValueError):
            resimulate(np.zeros((3, 4)), T, hover_state([0, 0, 1.0]), quad, refine)


class TestAudit:
    def test_hover_passes(self):
        sc = hover_scenario()
        rep = audit(hover_traj(sc), sc)
        assert rep.passed, rep.failures
        assert rep.bound_violations == []
        assert max(rep.terminal_group_errors.values()) <= 1e-9
        assert rep.min_obstacle_margin == np.inf
        assert rep.energy == pytest.approx(120.0 * sc.quad.hover_thrust**2, rel=1e-9)

    def test_injected_thrust_violation(self):
        sc = hover_scenario()
        traj = hover_traj(sc)
        traj.U[5, 0] = 1.01 * sc.quad.u1_max
        rep = audit(traj, sc)
        assert not rep.passed
        hits = [b for b in rep.bound_violations if b.constraint == "thrust_max"]
        assert len(hits) == 1 and hits[0].node == 5
        assert hits[0].magnitude == pytest.approx(0.01 * sc.quad.u1_max)

    def test_injected_torque_violation(self):
        sc = hover_scenario()
        traj = hover_traj(sc)
        traj.U[3, 3] = -1.5   # one node only, brief enough to stay near hover
        rep = audit(traj, sc)
        assert any(b.constraint == "torque_z" and b.node == 3 for b in rep.bound_violations)
        assert not rep.passed

    def test_mission_time_bound(self):
        sc = hover_scenario(T_guess=90.0, T_max=100.0)
        rep = audit(hover_traj(sc, T=150.0), sc)
        assert any(b.constraint == "mission_time" for b in rep.bound_violations)

    def test_terminal_error_detected(self):
        sc = hover_scenario(x_goal=[31.5, -20.0, 40.0])
        rep = audit(hover_traj(sc), sc)
        assert rep.terminal_group_errors["position"] == pytest.approx(1.5, rel=1e-9)
        assert not rep.passed
        assert any("terminal position" in f for f in rep.failures)

    def test_throughput_shortfall(self, chan):
        sc = hover_scenario(q_min=1e15)
        rep = audit(hover_traj(sc), sc)
        assert any("throughput" in f for f in rep.failures)
        assert rep.required_throughput == 1e15
        # hovering in place: the fine and node grids integrate the same constant rate
        assert rep.achieved_throughput == pytest.approx(rep.coarse_throughput, rel=1e-12)

    def test_obstacle_margin_is_distance_to_axis(self):
        # hovering 45 m from the axis of a 40 m cylinder
        sc = hover_scenario(obstacles=[Obstacle((30.0, 25.0), 40.0)])
        rep = audit(hover_traj(sc), sc)
        assert rep.min_obstacle_margin == pytest.approx(45.0, abs=1e-9)
        assert rep.min_obstacle_clearance == pytest.approx(5.0, abs=1e-9)
        assert rep.passed

    def test_obstacle_penetration_fails(self):
        sc = hover_scenario()
        # scenarios refuse endpoints inside obstacles, so place it afterwards
        sc.obstacles = [Obstacle((30.0, -10.0), 12.0)]
        rep = audit(hover_traj(sc), sc)
        assert rep.min_obstacle_clearance == pytest.approx(-2.0, abs=1e-9)
        assert not rep.passed
        # within the tolerance it is accepted
        rep = audit(hover_traj(sc), sc, AuditTolerances(obstacle=2.5))
        assert rep.passed

    def test_report_serializes(self):
        sc = hover_scenario()
        d = audit(hover_traj(sc), sc).to_dict()
        assert d["min_obstacle_margin"] is None and d["min_standoff_margin"] is None
        assert len(d["terminal_state_error"]) == 12
        assert d["passed"] is True
