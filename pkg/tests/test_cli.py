from __future__ import annotations

import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cavtraj.cli import (
    CSV_HEADER, EXIT_INFEASIBLE, EXIT_INPUT, EXIT_IO, EXIT_OK, InputError, RunConfig,
    export_trajectory, load_scenario, main, resolve_input, scenario_to_dict, write_scenario,
)
from cavtraj.domain import BoundaryConditions, Scenario, ScenarioError, VehicleParams
from cavtraj.lead import LeadProfile, LeadSegment
from cavtraj.sim import preset, run_case


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_preset_resolves_with_defaults():
    sc = resolve_input("case1")
    assert sc == preset("case1").scenario
    assert sc.params == VehicleParams()


def test_overrides_applied():
    sc = resolve_input("case1", [("gamma", 2.5), ("v_max", 30.0)])
    assert sc.params.gamma == 2.5 and sc.params.v_max == 30.0


def test_missing_tf_is_named(tmp_path):
    doc = scenario_to_dict(preset("case1").scenario)
    del doc["boundary"]["tf"]
    path = tmp_path / "s.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(InputError, match="'tf'"):
        load_scenario(path)


def test_parse_error_reports_line(tmp_path):
    path = tmp_path / "s.json"
    path.write_text('{\n  "boundary": {\n    "tf": 26,,\n  }\n}\n')
    with pytest.raises(InputError, match="line 3"):
        load_scenario(path)


def test_validation_error_lists_violations(tmp_path):
    doc = scenario_to_dict(preset("case1").scenario)
    doc["params"]["u_min"] = 0.5
    path = tmp_path / "s.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(ScenarioError) as exc:
        load_scenario(path)
    assert [v.field for v in exc.value.violations] == ["u_min"]
    assert main(["solve", str(path), "--out", str(tmp_path / "o")]) == EXIT_INPUT


def test_wrong_type_is_named(tmp_path):
    doc = scenario_to_dict(preset("case1").scenario)
    doc["params"]["rho"] = "fast"
    path = tmp_path / "s.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(InputError, match="rho"):
        load_scenario(path)



@settings(max_examples=50)
@given(st.floats(0.5, 2.0), st.floats(0.5, 3.0), st.floats(0.8, 1.6), st.floats(5.0, 40.0),
       st.floats(8.0, 18.0), st.one_of(st.none(), st.tuples(st.floats(-0.4, 0.4), st.floats(-0.01, 0.01))))
def test_round_trip(tmp_path_factory, xi, gamma, rho, tf, v0, lead_acc):
    lead = None
    if lead_acc is not None:
        lead = LeadProfile(60.0, 12.0, (LeadSegment(0.0, tf / 2, *lead_acc), LeadSegment(tf / 2, tf)))
    sc = Scenario(VehicleParams(xi=xi, gamma=gamma, rho=rho), BoundaryConditions(0.0, tf, v0 * tf * 0.9, v0),
                  lead, name="rt")
    path = tmp_path_factory.mktemp("rt") / "s.json"
    write_scenario(sc, path)
    back = load_scenario(path)
    assert back == sc


def test_csv_layout_case1(tmp_path):
    traj, _ = run_case("case1")
    path = tmp_path / "t.csv"
    count = export_trajectory(traj, 0.01, path)
    rows = _rows(path)
    assert tuple(rows[0]) == CSV_HEADER
    data = rows[1:]
    assert count == len(data) == 2601 + 2 * len(traj.junctions)
    t = np.array([float(r[0]) for r in data])
    assert t[0] == 0.0 and t[-1] == 26.0
    dup = t[1:] == t[:-1]
    assert np.all((np.diff(t) > 0) | dup)
    for j in traj.junctions:
        assert np.count_nonzero(t == j.time) == 2
    assert sorted(t[1:][dup]) == sorted(j.time for j in traj.junctions)
    labels = [r[6] for r in data]
    runs = [labels[0]] + [b for a, b in zip(labels, labels[1:]) if a != b]
    assert runs == ["unconstrained", "safety", "unconstrained"]
    # full double precision survives the text round trip
    p, v, u = traj.eval(float(data[1][0]))
    assert float(data[1][1]) == p and float(data[1][2]) == v


def test_csv_lead_free_uses_na(tmp_path):
    traj, _ = run_case("lead_free")
    path = tmp_path / "t.csv"
    export_trajectory(traj, 0.5, path)
    data = _rows(path)[1:]
    assert len(data) == 53
    assert all(r[4] == r[5] == r[7] == r[8] == "NA" for r in data)


def test_csv_includes_tf_off_grid(tmp_path):
    traj, _ = run_case("lead_free")
    path = tmp_path / "t.csv"
    export_trajectory(traj, 0.7, path)
    t = [float(r[0]) for r in _rows(path)[1:]]
    assert t[-1] == 26.0 and t[-2] < 26.0


def test_solve_writes_outputs(tmp_path, capsys):
    out = tmp_path / "case1"
    assert main(["solve", "case1", "--out", str(out), "--oracle", "--oracle-n", "1300"]) == EXIT_OK
    summary = json.loads((out / "summary.json").read_text())
    assert {"scenario", "arcs", "junctions", "total_cost", "min_margins", "feasible", "oracle"} <= set(summary)
    assert summary["feasible"] is True
    assert summary["oracle"]["cost_gap_rel"] < 0.01
    assert {"kind", "t_enter", "t_exit"} <= set(summary["arcs"][0])
    assert {"time", "control_jump", "pi"} <= set(summary["junctions"][0])
    assert summary["scenario"] == scenario_to_dict(preset("case1").scenario)
    assert (out / "trajectory.csv").exists()


def test_cruise_summary(tmp_path):
    sc = Scenario(VehicleParams(), BoundaryConditions(0.0, 20.0, 240.0, 12.0), name="cruise")
    path = tmp_path / "cruise.json"
    write_scenario(sc, path)
    assert main(["solve", str(path), "--out", str(tmp_path / "o")]) == EXIT_OK
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["total_cost"] == 0.0
    assert len(summary["arcs"]) == 1 and summary["junctions"] == []


def test_case3_exit_code_and_marker(tmp_path):
    assert main(["solve", "case3", "--out", str(tmp_path)]) == EXIT_INFEASIBLE
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["feasible"] is False
    assert summary["arcs"][-1]["kind"] == "safety"
    assert summary["terminal_residual"] < 0


def test_input_errors(tmp_path):
    assert main(["solve", "no_such_thing", "--out", str(tmp_path)]) == EXIT_INPUT
    assert main(["solve", "case1", "--dt", "0", "--out", str(tmp_path)]) == EXIT_INPUT
    assert main(["solve", "case1", "--gamma", "9", "--out", str(tmp_path)]) == EXIT_INPUT
    with pytest.raises(InputError):
        RunConfig("case1", oracle_n=1)


def test_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["solve", "lead_free", "--out", str(blocker / "sub")]) == EXIT_IO


def test_scenario_subcommand(tmp_path):
    path = tmp_path / "c2.json"
    assert main(["scenario", "case2", "-o", str(path)]) == EXIT_OK
    assert load_scenario(path) == preset("case2").scenario


def test_batch(tmp_path):
    src = tmp_path / "in"
    src.mkdir()
    write_scenario(preset("lead_free").scenario, src / "a.json")
    write_scenario(preset("case3").scenario, src / "b.json")
    out = tmp_path / "out"
    assert main(["solve", "--batch", str(src), "--out", str(out), "--workers", "1"]) == EXIT_INFEASIBLE
    assert (out / "a" / "summary.json").exists() and (out / "b" / "trajectory.csv").exists()
