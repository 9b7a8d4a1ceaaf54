import json
from dataclasses import replace

import pytest

from riskbmpc.cli import TRACE_SCHEMA, main, read_samples_csv, read_trace_csv, trace_columns
from riskbmpc.scenario import VehicleSpec, load_scenario, make_scenario, save_scenario


@pytest.fixture
def ts1_file(tmp_path):
    path = tmp_path / "ts1.yaml"
    assert main(["export-scenario", "TS1", "--out", str(path)]) == 0
    return path


def solve_json(tmp_path, *args):
    out = tmp_path / "res.json"
    assert main(["solve", *args, "--out", str(out)]) == 0
    return json.loads(out.read_text())


def test_export_round_trip(ts1_file):
    assert load_scenario(ts1_file).to_dict() == make_scenario("TS1").to_dict()


def test_solve_converges(tmp_path, ts1_file):
    res = solve_json(tmp_path, str(ts1_file))
    assert res["converged"] is True
    assert len(res["q_final"]) == 4 and len(res["joint_modes"]) == 4
    assert res["risk_aware"] is True


def test_alpha_one_nominal_flag_is_irrelevant(tmp_path, ts1_file):
    a = solve_json(tmp_path, str(ts1_file), "--alpha", "1")
    b = solve_json(tmp_path, str(ts1_file), "--alpha", "1", "--nominal")
    assert abs(a["final_cost"] - b["final_cost"]) <= 1e-6


def test_builtin_name_accepted(tmp_path):
    assert solve_json(tmp_path, "TS2")["scenario"] == "TS2"


@pytest.mark.parametrize(
    "argv",
    [
        ["solve", "missing.yaml"],
        ["solve", "TS1", "--alpha", "2"],
        ["solve", "TS1", "--gamma", "-1", "--rho0", "1"],
        ["solve", "TS1", "--gamma", "0.5", "--rho0", "4"],
        ["solve", "TS1", "--gamma", "0.01"],
        ["montecarlo", "TS1", "--n", "0"],
        ["closedloop", "TS1", "--ta", "-1"],
        ["export-scenario", "TS9"],
    ],
)
def test_bad_input_exits_nonzero(argv, capsys):
    assert main(argv) == 2
    assert "error" in capsys.readouterr().err


def test_malformed_yaml(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("name: [unclosed\n")
    assert main(["solve", str(bad)]) == 2
    wrong = tmp_path / "wrong.yaml"
    wrong.write_text("base: TS1\nhorizon: banana\n")
    assert main(["solve", str(wrong)]) == 2


def test_montecarlo_samples_are_reproducible(tmp_path):
    paths = []
    for run in range(2):
        out = tmp_path / f"mc{run}.json"
        assert main(["montecarlo", "TS1", "--n", "2", "--seed", "5", "--out", str(out)]) == 0
        paths.append(out.with_suffix(".csv"))
        assert (tmp_path / f"mc{run}_timing.csv").exists()
    assert paths[0].read_text() == paths[1].read_text()
    rows = read_samples_csv(paths[0])
    assert [(r["seed"], r["planner"]) for r in rows] == [(5, "risk_aware"), (6, "risk_aware"), (5, "nominal"), (6, "nominal")]
    summary = json.loads((tmp_path / "mc0.json").read_text())
    assert summary["risk_aware"]["n"] == 2 and summary["seed"] == 5


def test_closedloop_trace_schema(tmp_path):
    out = tmp_path / "trace.csv"
    assert main(["closedloop", "TS1", "--duration", "1.2", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == f"# {TRACE_SCHEMA} failed=0"
    assert lines[1].split(",") == trace_columns(make_scenario("TS1"))
    meta, rows = read_trace_csv(out)
    assert not meta["failed"] and len(rows) == 12
    # Before the reveal q covers all modes; after it only the true one.
    assert sum(rows[0][c] for c in rows[0] if c.startswith("q[")) == pytest.approx(1.0)
    assert rows[-1]["q[Yield/Assert]"] == 1.0


def test_reveal_at_start_equals_single_mode_trace(tmp_path):
    cfg = make_scenario("TS1")
    single = replace(
        cfg, vehicles=[VehicleSpec(v.name, [m for m in v.modes if m.label == v.true_mode], v.true_mode) for v in cfg.vehicles]
    )
    save_scenario(single, tmp_path / "single.yaml")
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["closedloop", "TS1", "--ta", "0", "--duration", "1.0", "--out", str(a)]) == 0
    assert main(["closedloop", str(tmp_path / "single.yaml"), "--ta", "0", "--duration", "1.0", "--out", str(b)]) == 0
    (_, ra), (_, rb) = read_trace_csv(a), read_trace_csv(b)
    for x, y in zip(ra, rb):
        for key in ("t", "px", "py", "theta", "v", "a", "delta"):
            assert x[key] == pytest.approx(y[key], abs=1e-9)
        assert x["q[Yield/Assert]"] == y["q[Yield/Assert]"] == 1.0
