import csv
import json

import numpy as np
import pytest
import yaml

from commtraj import cli
from commtraj.config import load_scenario
from commtraj.outputs import FILES, TRAJECTORY_COLUMNS, read_trajectory
from commtraj.scp import CONVERGED, MAX_ITERS, STALLED

SMALL = """\
name: short_hop
mission:
  start_position_m: [0.0, 0.0, 10.0]
  goal_position_m: [40.0, 20.0, 15.0]
  q_min_megabytes: 0.3
  nodes: 12
  T_guess_s: 20.0
  T_min_s: 5.0
  T_max_s: 200.0
  constraint_substeps: 2
channel:
  gs_position_m: [20.0, 30.0, 0.0]
solver:
  iter_max: 150
"""


@pytest.fixture(scope="module")
def small_yaml(tmp_path_factory):
    path = tmp_path_factory.mktemp("scen") / "short_hop.yaml"
    path.write_text(SMALL)
    return path


@pytest.fixture(scope="module")
def solved(small_yaml, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = cli.main(["solve", str(small_yaml), "--out", str(out)])
    return code, out


def test_solve_exit_code_and_files(solved, capsys):
    code, out = solved
    assert code == cli.EXIT_OK
    for name in FILES.values():
        assert (out / name).is_file()


def test_summary(solved):
    _, out = solved
    s = json.loads((out / "summary.json").read_text())
    assert s["status"] == CONVERGED and s["valid"] is True and s["audit_passed"] is True
    assert s["q_achieved_bits"] >= 0.3 * 8e6 * (1 - 1e-3)
    assert s["config"]["mission"]["nodes"] == 12


def test_trajectory_table(solved):
    _, out = solved
    with (out / "trajectory.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == TRAJECTORY_COLUMNS
    assert len(rows) - 1 == 12
    data = np.array(rows[1:], dtype=float)
    tau, t = data[:, 0], data[:, 1]
    assert np.allclose(tau, np.linspace(0, 1, 12))
    assert np.allclose(t, tau * t[-1])
    assert np.all(np.diff(data[:, -1]) >= 0)
    assert data[0, -1] == 0.0
    assert np.all(data[:, -2] > 0)


def test_iteration_log(solved):
    _, out = solved
    lines = (out / "iterations.jsonl").read_text().splitlines()
    recs = [json.loads(ln) for ln in lines]
    assert recs and all("wall_time" not in r for r in recs)
    assert [r["iter"] for r in recs] == list(range(1, len(recs) + 1))
    assert {"J_hat_ref", "L_star", "rho", "trust", "accepted", "nu_norm", "gap"} <= set(recs[0])


def test_config_round_trip(solved, small_yaml):
    _, out = solved
    assert load_scenario(out / "config.yaml").document == load_scenario(small_yaml).document


def test_outputs_are_byte_stable(solved, small_yaml, tmp_path):
    _, out = solved
    assert cli.main(["solve", str(small_yaml), "--out", str(tmp_path)]) == cli.EXIT_OK
    for name in FILES.values():
        assert (tmp_path / name).read_bytes() == (out / name).read_bytes(), name


def test_validate_accepts_solution(solved, small_yaml, tmp_path, capsys):
    _, out = solved
    capsys.readouterr()
    report = tmp_path / "audit.json"
    code = cli.main(["validate", str(out / "trajectory.csv"), str(small_yaml), "--out", str(report)])
    assert code == cli.EXIT_OK
    assert json.loads(capsys.readouterr().out)["passed"] is True
    assert json.loads(report.read_text())["passed"] is True


def test_validate_detects_tampering(solved, small_yaml, tmp_path):
    _, out = solved
    traj = read_trajectory(out / "trajectory.csv")
    rows = list(csv.reader((out / "trajectory.csv").open()))
    rows[6][TRAJECTORY_COLUMNS.index("thrust_n")] = repr(1e3)
    bad = tmp_path / "bad.csv"
    with bad.open("w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    assert traj.N == 12
    assert cli.main(["validate", str(bad), str(small_yaml)]) == cli.EXIT_AUDIT


def test_iteration_limit_exit_code(small_yaml, tmp_path):
    assert cli.main(["solve", str(small_yaml), "--out", str(tmp_path), "--max-iters", "1"]) == cli.EXIT_MAX_ITERS
    s = json.loads((tmp_path / "summary.json").read_text())
    assert s["status"] == MAX_ITERS and s["valid"] is False


def test_sweep_writes_one_directory_per_demand(small_yaml, tmp_path, capsys):
    code = cli.main(["sweep", "--scenario", str(small_yaml), "--qmin", "0,0.1", "--out", str(tmp_path),
                     "--max-iters", "1"])
    assert code == cli.EXIT_MAX_ITERS
    lines = [json.loads(ln) for ln in capsys.readouterr().out.splitlines()]
    assert [ln["q_min_megabytes"] for ln in lines] == [0.0, 0.1]
    assert (tmp_path / "qmin_0mb" / "summary.json").is_file()
    assert (tmp_path / "qmin_0.1mb" / "summary.json").is_file()


@pytest.mark.parametrize("status, passed, code", [
    (CONVERGED, True, 0), (CONVERGED, False, 4), (CONVERGED, None, 4),
    (MAX_ITERS, False, 2), (STALLED, False, 3),
])
def test_exit_code_table(status, passed, code):
    assert cli.exit_code(status, passed) == code


@pytest.mark.parametrize("argv", [
    [],
    ["solve"],
    ["solve", "freespace_30mb"],
    ["bogus"],
    ["solve", "freespace_30mb", "--out", "x", "--max-iters", "0"],
    ["sweep", "--qmin", "a,b", "--out", "x"],
    ["sweep", "--qmin", ",", "--out", "x"],
    ["solve", "/nonexistent.yaml", "--out", "x"],
])
def test_usage_errors(argv, capsys):
    with pytest.raises(SystemExit) as info:
        code = cli.main(argv)
        raise SystemExit(code)
    assert info.value.code == cli.EXIT_USAGE


def test_bad_config_is_usage_error(tmp_path, capsys):
    doc = yaml.safe_load(SMALL)
    doc["quadrotor"] = {"mass_kg": -1.0}
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump(doc))
    assert cli.main(["solve", str(path), "--out", str(tmp_path / "o")]) == cli.EXIT_USAGE
    assert "mass_kg" in capsys.readouterr().err


def test_validate_rejects_wrong_node_count(solved, tmp_path):
    _, out = solved
    assert cli.main(["validate", str(out / "trajectory.csv"), "freespace_30mb"]) == cli.EXIT_USAGE
    bad = tmp_path / "junk.csv"
    bad.write_text("a,b\n1,2\n")
    assert cli.main(["validate", str(bad), "freespace_30mb"]) == cli.EXIT_USAGE
