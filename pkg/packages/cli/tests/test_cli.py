"""CLI command tests using Typer's CliRunner."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from massfuse.errors import ModelError
from massfuse_cli.main import app
from typer.testing import CliRunner

runner = CliRunner()

_N = 1000


def _envelope(result) -> dict:
    """The JSON envelope on stdout, skipping any log lines around it."""
    text = result.stdout
    obj, _ = json.JSONDecoder().raw_decode(text, text.index("{"))
    return obj


@pytest.fixture
def sample_files(tmp_path: Path) -> tuple[Path, Path]:
    """Sample A (50 of N=1000, with pi and delta_b) and a 300-row Sample B."""
    rng = np.random.default_rng(7)
    x = rng.normal(size=(_N, 2))
    y1 = 1.0 + x[:, 0] + x[:, 1] + rng.normal(size=_N)
    y2 = (rng.random(_N) < 0.4).astype(int)
    in_b = np.zeros(_N, dtype=int)
    in_b[rng.choice(_N, 300, replace=False)] = 1
    pop = pd.DataFrame({"id": np.arange(_N), "x1": x[:, 0], "x2": x[:, 1], "y1": y1, "y2": y2, "delta_b": in_b})

    a = pop.iloc[np.sort(rng.choice(_N, 50, replace=False))].assign(pi=50 / _N)
    a_path = tmp_path / "a.csv"
    a.to_csv(a_path, index=False)

    b_path = tmp_path / "b.csv"
    pop[pop["delta_b"] == 1].drop(columns="delta_b").to_csv(b_path, index=False)
    return a_path, b_path


def _estimate_args(sample_files, method: str, *extra: str) -> list[str]:
    a, b = sample_files
    return [
        "estimate", "-m", method, "--a", str(a), "--b", str(b),
        "--covariates", "x1,x2", "--outcomes", "y1,y2", "--binary", "y2", "-N", str(_N), *extra,
    ]


@pytest.fixture
def sim_config(tmp_path: Path) -> Path:
    path = tmp_path / "sim.yaml"
    path.write_text(
        "N: 400\nn: 40\nreplicates: 2\nmaster_seed: 5\nscenarios: [I]\ngam:\n  grid_size: 3\n", encoding="utf-8"
    )
    return path


class TestAppHelp:
    def test_no_args_shows_help(self):
        result = runner.invoke(app, [])
        assert result.exit_code in (0, 2)
        assert "mass imputation" in result.output.lower()

    def test_help_lists_commands(self):
        result = runner.invoke(app, ["--help"])
        assert result.exit_code == 0
        for command in ("simulate", "estimate", "match"):
            assert command in result.output


class TestVersionFlag:
    def test_version_flag(self):
        result = runner.invoke(app, ["--version"])
        assert result.exit_code == 0
        name, version = result.output.strip().split()
        assert name == "massfuse"
        assert "." in version


class TestEstimateCommand:
    @pytest.mark.parametrize("method", ["HT", "NNI", "KNN", "GAM", "RC", "IPW", "DR"])
    def test_json_report(self, sample_files, method):
        result = runner.invoke(app, ["--json", *_estimate_args(sample_files, method)])
        assert result.exit_code == 0, result.output
        data = _envelope(result)["data"]
        assert data["target"] == "y1"
        report = data["report"]
        assert report["method"] == method
        assert report["variance"] >= 0
        assert report["ci95"][0] <= report["estimate"] <= report["ci95"][1]

    def test_conditional_mean(self, sample_files):
        args = _estimate_args(sample_files, "nni", "--g", "product:y1*y2", "--g-den", "y2")
        result = runner.invoke(app, ["--json", *args])
        assert result.exit_code == 0, result.output
        data = _envelope(result)["data"]
        assert data["target"] == "y1*y2 / y2"
        meta = data["report"]["meta"]
        assert data["report"]["estimate"] == pytest.approx(meta["numerator"] / meta["denominator"])

    def test_human_output(self, sample_files):
        result = runner.invoke(app, _estimate_args(sample_files, "KNN", "--k", "3"))
        assert result.exit_code == 0
        assert "KNN estimate of y1" in result.stdout

    def test_stratified_design(self, sample_files, tmp_path):
        a, b = sample_files
        frame = pd.read_csv(a)
        frame["stratum"] = np.where(frame["id"] < 500, 1, 2)
        counts = frame["stratum"].value_counts()
        frame["pi"] = np.where(frame["stratum"] == 1, counts[1] / 500, counts[2] / 500)
        frame.to_csv(a, index=False)
        strata = tmp_path / "strata.csv"
        strata.write_text(f"label,N,n\n1,500,{counts[1]}\n2,500,{counts[2]}\n")
        args = [
            "--json", "estimate", "-m", "NNI", "--a", str(a), "--b", str(b), "--covariates", "x1,x2",
            "--outcomes", "y1", "--design", "stratified", "--strata", str(strata),
        ]
        result = runner.invoke(app, args)
        assert result.exit_code == 0, result.output
        assert _envelope(result)["data"]["report"]["method"] == "NNI"

    def test_missing_population_size(self, sample_files):
        args = [a for a in _estimate_args(sample_files, "NNI") if a not in ("-N", str(_N))]
        result = runner.invoke(app, ["--json", *args])
        assert result.exit_code == 1
        assert _envelope(result)["error"]["code"] == "value_error"

    def test_missing_file(self, sample_files, tmp_path):
        args = _estimate_args(sample_files, "NNI")
        args[args.index("--a") + 1] = str(tmp_path / "nope.csv")
        result = runner.invoke(app, ["--json", *args])
        assert result.exit_code == 1
        assert _envelope(result)["error"]["code"] == "file_not_found"

    def test_unknown_column(self, sample_files):
        args = _estimate_args(sample_files, "NNI")
        args[args.index("--covariates") + 1] = "x1,x9"
        result = runner.invoke(app, ["--json", *args])
        assert result.exit_code == 1
        assert _envelope(result)["error"]["code"] == "schema_error"

    def test_unknown_method(self, sample_files):
        result = runner.invoke(app, _estimate_args(sample_files, "BOGUS"))
        assert result.exit_code == 1
        assert "Error" in result.output


class TestMatchCommand:
    def test_csv_to_stdout(self, sample_files):
        a, b = sample_files
        result = runner.invoke(app, ["match", "--a", str(a), "--b", str(b), "--covariates", "x1,x2", "--k", "2"])
        assert result.exit_code == 0
        lines = result.stdout.strip().splitlines()
        assert lines[0] == "a_id,rank,donor_id,distance"
        assert len(lines) == 1 + 50 * 2
        first, second = lines[1].split(","), lines[2].split(",")
        assert (first[1], second[1]) == ("1", "2")
        assert float(first[3]) <= float(second[3])

    def test_write_file_json(self, sample_files, tmp_path):
        a, b = sample_files
        out = tmp_path / "matches.csv"
        args = ["--json", "match", "--a", str(a), "--b", str(b), "--covariates", "x1,x2", "-o", str(out)]
        result = runner.invoke(app, args)
        assert result.exit_code == 0
        assert _envelope(result)["data"] == {"file": str(out), "rows": 50, "k": 1}
        assert len(pd.read_csv(out)) == 50

    def test_donor_pool_too_small(self, sample_files):
        a, b = sample_files
        args = ["--json", "match", "--a", str(a), "--b", str(b), "--covariates", "x1", "--k", "301"]
        result = runner.invoke(app, args)
        assert result.exit_code == 1
        assert _envelope(result)["error"]["code"] == "donor_pool_error"


class TestSimulateCommand:
    def test_writes_report(self, sim_config, tmp_path):
        out = tmp_path / "run"
        result = runner.invoke(app, ["simulate", "-c", str(sim_config), "-o", str(out)])
        assert result.exit_code == 0, result.output
        assert {p.name for p in out.iterdir()} == {"report.csv", "report.txt", "config.json"}
        assert len(pd.read_csv(out / "report.csv")) == 21
        assert "Report written" in result.stdout

    def test_json_envelope(self, sim_config, tmp_path):
        result = runner.invoke(app, ["--json", "simulate", "-c", str(sim_config), "-o", str(tmp_path / "run")])
        assert result.exit_code == 0
        data = _envelope(result)["data"]
        assert len(data["files"]) == 3
        assert len(data["cells"]) == 21

    def test_invalid_config_exits_2(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("replicates: -1\n")
        result = runner.invoke(app, ["--json", "simulate", "-c", str(path), "-o", str(tmp_path / "run")])
        assert result.exit_code == 2
        assert _envelope(result)["error"]["code"] == "config_error"

    def test_sample_larger_than_population_exits_2(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("N: 100\nn: 500\n")
        result = runner.invoke(app, ["simulate", "-c", str(path), "-o", str(tmp_path / "run")])
        assert result.exit_code == 2

    def test_unwritable_out_directory(self, sim_config, tmp_path):
        out = tmp_path / "taken"
        out.write_text("not a directory")
        result = runner.invoke(app, ["--json", "simulate", "-c", str(sim_config), "-o", str(out)])
        assert result.exit_code == 1
        assert _envelope(result)["error"]["code"] == "io_error"

    def test_error_rate_over_threshold_exits_3(self, sim_config, tmp_path, monkeypatch):
        def failing(method, inputs, g):
            raise ModelError("forced failure")

        monkeypatch.setattr("massfuse.harness.estimate", failing)
        out = tmp_path / "run"
        result = runner.invoke(app, ["simulate", "-c", str(sim_config), "-o", str(out), "--workers", "1"])
        assert result.exit_code == 3
        assert (out / "report.csv").exists()
