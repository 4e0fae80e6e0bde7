import csv
import json

import pytest

from dncrelay.cli import main
from dncrelay.experiments import ExperimentSpec, preset, run_experiment
from dncrelay.scenario import Scenario, dump_json, solution_from_dict


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def scenario_file(tmp_path):
    path = tmp_path / "scen.json"
    dump_json(Scenario(arrivals={"lambda1": 0.5, "lambda2": 1.0, "eps": 0.5}).to_dict(), path)
    return path


def test_solve_static_default_point(capsys, tmp_path):
    code, out, _ = run(capsys, "solve-static", "--out", str(tmp_path))
    assert code == 0
    d = json.loads(out)
    assert d["total_energy"] == pytest.approx(15.0, rel=0.10)
    assert json.loads((tmp_path / "solution.json").read_text()) == d


def test_solve_static_conventional(capsys):
    code, out, _ = run(capsys, "solve-static", "--conventional")
    assert code == 0
    assert json.loads(out)["total_energy"] == pytest.approx(31.0, rel=0.10)


def test_solve_ergodic(capsys):
    code, out, _ = run(capsys, "solve-ergodic", "--max-packets", "6")
    assert code == 0
    d = json.loads(out)
    assert d["total_energy"] < 30
    assert all(len(v) == 6 for v in d["rate_levels"]["pmf"].values())


def test_solution_roundtrip(capsys, tmp_path, scenario_file):
    run(capsys, "solve-ergodic", "--scenario", str(scenario_file), "--out", str(tmp_path))
    d = json.loads((tmp_path / "solution.json").read_text())
    assert solution_from_dict(d).total_energy == pytest.approx(d["total_energy"])


def test_queue_analysis_from_solution(capsys, tmp_path, scenario_file):
    run(capsys, "solve-static", "--scenario", str(scenario_file), "--out", str(tmp_path))
    code, out, _ = run(
        capsys, "queue-analysis", "--solution", str(tmp_path / "solution.json"), "--trunc", "32", "--out", str(tmp_path)
    )
    assert code == 0
    d = json.loads(out)
    assert d["pair1"]["Q1"] > 0
    assert d["actual_energy"]["total"] < d["design_energy"]
    rows = list(csv.reader(open(tmp_path / "marginals.csv")))
    assert rows[0] == ["n", "Q1", "Qr2", "Q2", "Qr1"]


def test_queue_analysis_rejects_eps_with_solution(capsys, tmp_path, scenario_file):
    run(capsys, "solve-static", "--scenario", str(scenario_file), "--out", str(tmp_path))
    code, _, err = run(capsys, "queue-analysis", "--solution", str(tmp_path / "solution.json"), "--eps", "0.2")
    assert code != 0
    assert json.loads(err)["command"] == "queue-analysis"


def test_simulate_writes_report_and_trace(capsys, tmp_path, scenario_file):
    code, out, _ = run(
        capsys, "simulate", "--scenario", str(scenario_file), "--slots", "5000", "--seed", "3", "--out", str(tmp_path)
    )
    assert code == 0
    d = json.loads(out)
    assert d["slots"] == 5000 and d["seed"] == 3
    assert d["energy_per_slot"] <= d["design_energy"]
    rows = list(csv.reader(open(tmp_path / "trace.csv")))
    assert rows[0] == ["slot", "Q1", "Q2", "Qr1", "Qr2", "energy"]
    assert len(rows) == 6


def test_simulate_unstable_exit(capsys, tmp_path):
    path = tmp_path / "bad.json"
    dump_json(Scenario(arrivals={"lambda1": 0.5, "lambda2": 1.0, "eps": 0.0}, quantization="floor").to_dict(), path)
    code, _, err = run(capsys, "simulate", "--scenario", str(path), "--slots", "200000", "--guard", "200")
    assert code == 3
    assert "guard" in json.loads(err)["error"]


def test_missing_file_is_structured_error(capsys):
    code, out, err = run(capsys, "solve-static", "--scenario", "/nonexistent/scenario.json")
    assert code == 1
    assert out == ""
    e = json.loads(err)
    assert e["type"] == "FileNotFoundError"


def test_bad_scenario_key(capsys, tmp_path):
    path = tmp_path / "s.json"
    path.write_text(json.dumps({"channel": "static", "wobble": 1}))
    code, _, err = run(capsys, "solve-static", "--scenario", str(path))
    assert code == 1
    assert "wobble" in json.loads(err)["error"]


def test_infeasible_exit_code(capsys, tmp_path):
    path = tmp_path / "s.json"
    dump_json(Scenario(arrivals={"lambda1": 500.0, "lambda2": 500.0}).to_dict(), path)
    code, _, err = run(capsys, "solve-static", "--scenario", str(path))
    assert code == 3
    assert json.loads(err)["type"] == "InfeasibleError"


def test_usage_error_exits_2():
    with pytest.raises(SystemExit) as info:
        main(["no-such-command"])
    assert info.value.code == 2


def test_experiment_preset_outputs(capsys, tmp_path):
    code, out, _ = run(capsys, "experiment", "--preset", "coding-gain", "--out", str(tmp_path))
    assert code == 0
    d = json.loads(out)
    assert d["failed_rows"] == 0
    rows = list(csv.DictReader(open(d["csv"])))
    assert len(rows) == 20
    for r in rows:
        assert float(r["conventional_energy"]) >= float(r["dnc_static_energy"])
    assert all(p.endswith(".png") for p in d["figures"])
    manifest = json.loads(open(d["manifest"]).read())
    assert manifest["experiment"]["name"] == "coding-gain"
    assert manifest["versions"]["dncrelay"]


def test_manifest_rerun_is_byte_identical(capsys, tmp_path):
    first = tmp_path / "a"
    second = tmp_path / "b"
    spec = preset("actual-energy", grid=[0.3, 0.5], slots=3000, trunc=16, max_trunc=16)
    res = run_experiment(spec, first, figures=False)
    code, out, _ = run(capsys, "experiment", "--scenario", str(res.manifest_path), "--out", str(second), "--no-figures")
    assert code == 0
    assert (first / "actual-energy.csv").read_bytes() == (second / "actual-energy.csv").read_bytes()


def test_failed_row_does_not_stop_sweep(tmp_path):
    spec = preset("coding-gain", grid=[0.5, 400.0, 600.0])
    res = run_experiment(spec, tmp_path, figures=False)
    status = [r["status"] for r in res.rows]
    assert status == ["ok", "failed", "failed"]
    assert "InfeasibleError" in res.rows[1]["error"]
    rows = list(csv.DictReader(open(res.csv_path)))
    assert rows[1]["status"] == "failed"


def test_oracle_sweep_rows_agree():
    res = run_experiment(preset("oracle", grid=[0.1, 1.0, 2.0]))
    for r in res.rows:
        assert abs(r["oracle_energy"] - r["dnc_static_energy"]) / r["oracle_energy"] <= 0.01


def test_queue_eps_sweep_rows_agree():
    res = run_experiment(preset("queue-eps", grid=[0.5, 0.9], slots=10**6))
    for r in res.rows:
        assert r["q1_sim"] == pytest.approx(r["q1_analytic"], rel=0.05)
        assert r["qr2_sim"] == pytest.approx(r["qr2_analytic"], rel=0.05)


def test_parallel_rows_match_serial():
    spec = preset("fading", grid=[0.5, 1.0], draws=20)
    serial = run_experiment(spec).rows
    spec.workers = 2
    assert run_experiment(spec).rows == serial


@pytest.mark.parametrize(
    "changes",
    [{"grid": []}, {"grid": [0.5, 0.5]}, {"sweep": "gain"}, {"quantities": ["magic"]}, {"cases": {}}],
)
def test_spec_validation(changes):
    d = preset("coding-gain").to_dict()
    d.update(changes)
    with pytest.raises(ValueError):
        ExperimentSpec.from_dict(d)


def test_unknown_preset():
    with pytest.raises(KeyError):
        preset("fig99")


def test_scenario_fading_links(tmp_path):
    grid = list(range(0, 31))
    tab = {"kind": "tabulated", "grid": grid, "density": [2.0 ** -g for g in grid]}
    scen = Scenario(channel="rayleigh", links={"g1r": tab, "g2r": tab, "gr1": tab, "gr2": tab}, gains={})
    sol = scen.solve()
    assert sol.fractions.sum() == pytest.approx(1.0)
    assert max(abs(v) for v in sol.kkt_residuals.values()) <= 1e-6
