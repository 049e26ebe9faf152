import json

import numpy as np
import pytest

from cli import ClusterRobustCLI
from command.oracle_commands import parse_cluster_sizes
from services.errors import ConfigError


@pytest.fixture
def toy_csv(tmp_path):
    rng = np.random.default_rng(3)
    n = 24
    firm = np.repeat(np.arange(6), 4)
    x = rng.standard_normal(n)
    w = rng.standard_normal(n)
    y = 0.4 * x + 0.2 * w + rng.standard_normal(n) + rng.standard_normal(6)[firm]
    lines = ["y,x,w,firm"] + [f"{y[i]},{x[i]},{w[i]},f{firm[i]}" for i in range(n)]
    path = tmp_path / "toy.csv"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return str(path), x, y


def _run(capsys, *argv):
    code = ClusterRobustCLI().run(list(argv))
    return code, capsys.readouterr().out


def test_no_controls_matches_hand_formulas(capsys, toy_csv):
    path, x, y = toy_csv
    code, out = _run(capsys, "fit", "--input", path, "--y", "y", "--x", "x")
    assert code == 0
    report = json.loads(out)
    assert report["K"] == 0
    assert report["G"] == report["n"] == 24

    beta = x @ y / (x @ x)
    u = y - beta * x
    hc0 = np.sqrt(np.sum(x**2 * u**2)) / (x @ x)
    by_estimator = {row["estimator"]: row for row in report["results"]}
    for label in ("LZ", "CR"):
        assert by_estimator[label]["beta"] == pytest.approx(beta, abs=1e-10)
        assert by_estimator[label]["se"] == pytest.approx(hc0, abs=1e-10)


def test_fit_report_is_deterministic(capsys, toy_csv, tmp_path):
    path, _, _ = toy_csv
    argv = ["fit", "--input", path, "--y", "y", "--x", "x", "--w", "w", "--cluster", "firm", "--kappa-norm", "exact"]
    _, first = _run(capsys, *argv)
    _, second = _run(capsys, *argv)
    assert first == second

    report = json.loads(first)
    assert report["schema_version"] == 1
    assert report["command"] == "fit"
    assert report["kappa_inf_norm"] >= 1.0
    assert report["solver_info"]["mode"] == "dense"
    assert json.loads(json.dumps(report, sort_keys=True, indent=2)) == report

    out_file = tmp_path / "report.json"
    assert ClusterRobustCLI().run(argv + ["--output", str(out_file)]) == 0
    assert out_file.read_text(encoding="utf-8") == first
    assert capsys.readouterr().out == ""


def test_other_formats(capsys, toy_csv):
    path, _, _ = toy_csv
    code, out = _run(capsys, "fit", "--input", path, "--y", "y", "--x", "x", "--cluster", "firm", "--format", "csv")
    assert code == 0
    header = out.splitlines()[0].split(",")
    assert header[:3] == ["name", "estimator", "beta"]
    assert len(out.splitlines()) == 3

    code, out = _run(capsys, "fit", "--input", path, "--y", "y", "--x", "x", "--format", "text")
    assert code == 0
    assert "command: fit" in out
    assert "estimator" in out


def test_config_file_is_overridden_by_flags(capsys, toy_csv, tmp_path):
    path, _, _ = toy_csv
    cfg = tmp_path / "job.cfg"
    cfg.write_text(f"input = {path}\ny = y\nx = x\nalpha = 0.5\nestimators = lz\n", encoding="utf-8")
    code, out = _run(capsys, "fit", "--config", str(cfg), "--alpha", "0.1")
    assert code == 0
    report = json.loads(out)
    assert report["alpha"] == 0.1
    assert [row["estimator"] for row in report["results"]] == ["LZ"]


def test_diagnose(capsys, toy_csv):
    path, _, _ = toy_csv
    code, out = _run(capsys, "diagnose", "--input", path, "--y", "y", "--x", "x", "--w", "w", "--cluster", "firm")
    assert code == 0
    (diag,) = json.loads(out)["results"]
    assert diag["L"] == 6 * 16
    assert diag["max_cluster_size"] == 4
    assert diag["G"] == 6


def test_exit_codes(capsys, toy_csv, tmp_path):
    path, _, _ = toy_csv
    assert _run(capsys, "fit", "--input", path, "--y", "y", "--x", "x", "--estimators", "unf")[0] == 2
    assert _run(capsys, "fit", "--input", path, "--y", "y", "--x", "x", "--alpha", "2")[0] == 2
    assert _run(capsys, "fit", "--input", path, "--y", "y")[0] == 2
    assert _run(capsys, "fit", "--input", str(tmp_path / "nope.csv"), "--y", "y", "--x", "x")[0] == 3
    assert _run(capsys, "fit", "--input", path, "--y", "y", "--x", "missing")[0] == 3
    with pytest.raises(SystemExit) as exit_info:
        ClusterRobustCLI().run(["fit", "--solver-mode", "sparse"])
    assert exit_info.value.code == 2


def test_cluster_indicator_controls_exit_numerical(capsys, tmp_path):
    rng = np.random.default_rng(8)
    rows = ["y,x,d0,d1,d2,c"]
    for i in range(12):
        g = i // 4
        d = [1 if g == k else 0 for k in range(3)]
        rows.append(f"{rng.standard_normal()},{rng.standard_normal()},{d[0]},{d[1]},{d[2]},{g}")
    path = tmp_path / "dummies.csv"
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    code, out = _run(
        capsys, "fit", "--input", str(path), "--y", "y", "--x", "x", "--w", "d0,d1,d2", "--cluster", "c", "--estimators", "cr"
    )
    assert code == 4
    assert out == ""


@pytest.mark.parametrize(
    "clusters, k",
    [("2", 2), ("2", 0), ("singleton", 2), ("3,1,2", 1)],
)
def test_oracle_check_passes(capsys, clusters, k):
    code, out = _run(capsys, "oracle-check", "--n", "6", "--clusters", clusters, "--k", str(k))
    assert code == 0
    report = json.loads(out)
    assert report["passed"] is True
    assert len(report["results"]) == 5
    assert all(check["passed"] for check in report["results"])


def test_oracle_check_limits(capsys):
    assert _run(capsys, "oracle-check", "--n", "17")[0] == 2
    assert _run(capsys, "oracle-check", "--n", "6", "--k", "5")[0] == 2
    assert _run(capsys, "oracle-check", "--n", "6", "--clusters", "4,4")[0] == 2


def test_parse_cluster_sizes():
    assert parse_cluster_sizes("2,2,2", 6) == [2, 2, 2]
    assert parse_cluster_sizes("4", 10) == [4, 4, 2]
    assert parse_cluster_sizes("singleton", 3) == [1, 1, 1]
    with pytest.raises(ConfigError):
        parse_cluster_sizes("a,b", 4)
    with pytest.raises(ConfigError):
        parse_cluster_sizes("0", 4)


def test_simulate_presets_and_single_replication(capsys):
    code, out = _run(capsys, "simulate", "--list-presets")
    assert code == 0
    names = {row["preset"] for row in json.loads(out)["results"]}
    assert "table2:G175:K0.201" in names

    argv = ["simulate", "--variant", "many_controls", "--n", "40", "--groups", "10", "--controls", "4", "--reps", "1", "--seed", "9"]
    code, out = _run(capsys, *argv)
    assert code == 0
    report = json.loads(out)
    assert report["reps"] == 1
    rows = {row["estimator"]: row for row in report["results"]}
    assert set(rows) == {"UNFEASIBLE", "LZ", "CR"}
    for row in rows.values():
        assert row["coverage"] in (0.0, 1.0)
        assert row["bias_pct"] is None
    assert _run(capsys, *argv)[1] == out


def test_simulate_needs_a_design(capsys):
    assert _run(capsys, "simulate", "--variant", "many_controls")[0] == 2
    assert _run(capsys, "simulate", "--preset", "table99")[0] == 2
