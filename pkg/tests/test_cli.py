"""End-to-end CLI runs: pipeline, determinism, exit codes, config echo."""

import csv
import filecmp
import json
import os

import numpy as np
import pytest

from thresholdcurves import cli

FIT_CONTROLS = {"max_iter": 120, "rel_tol": 1e-8, "n_starts": 2, "seed": 7}
PRIMARY = {
    "simulate": ("data.csv", "truth.csv", "schema.json", "config_echo.json"),
    "fit": ("fit.json", "trace.csv", "config_echo.json"),
    "curves": ("theta.csv", "gamma.csv", "err0.csv", "err1.csv", "err_total.csv",
               "config_echo.json"),
    "shift": ("shift.json", "config_echo.json"),
    "sensitivity": ("sensitivity.csv", "config_echo.json"),
}


def _run(command, config, out, tmp_path, extra=()):
    cfg_path = tmp_path / f"cfg_{command}_{os.path.basename(out)}.json"
    cfg_path.write_text(json.dumps(config), encoding="utf-8")
    return cli.main([command, "--config", str(cfg_path), "--out", out, *extra])


def _read_curve(path):
    with open(path, encoding="utf-8") as fh:
        assert fh.readline().startswith("# tool_version=")
        rows = list(csv.DictReader(fh))
    return rows


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """simulate -> fit once; later tests reuse the outputs."""
    tmp = tmp_path_factory.mktemp("cli")
    sim_out = str(tmp / "sim")
    assert _run("simulate", {"scenario": "reference", "n": 900, "seed": 5}, sim_out, tmp) == 0
    fit_cfg = {
        "data": os.path.join(sim_out, "data.csv"),
        "schema": os.path.join(sim_out, "schema.json"),
        "controls": FIT_CONTROLS,
        "seed": 5,
    }
    fit_out = str(tmp / "fit")
    assert _run("fit", fit_cfg, fit_out, tmp) == 0
    return tmp, sim_out, fit_out, fit_cfg


class TestPipeline:
    def test_simulate_outputs(self, pipeline):
        _, sim_out, _, _ = pipeline
        for name in PRIMARY["simulate"]:
            assert os.path.exists(os.path.join(sim_out, name))
        with open(os.path.join(sim_out, "truth.csv"), encoding="utf-8") as fh:
            assert fh.readline().startswith("#")
            rows = list(csv.DictReader(fh))
        assert {r["h"] for r in rows} <= {"0", "1"}

    def test_fit_outputs(self, pipeline):
        _, _, fit_out, _ = pipeline
        with open(os.path.join(fit_out, "fit.json"), encoding="utf-8") as fh:
            doc = json.load(fh)
        assert doc["tool_version"]
        assert doc["config_hash"]
        trace = [float(r["loglik"]) for r in _read_curve(os.path.join(fit_out, "trace.csv"))]
        assert all(b - a >= -1e-8 for a, b in zip(trace, trace[1:]))

    def test_curves(self, pipeline):
        tmp, sim_out, fit_out, _ = pipeline
        cfg = {
            "data": os.path.join(sim_out, "data.csv"),
            "schema": os.path.join(sim_out, "schema.json"),
            "fit": os.path.join(fit_out, "fit.json"),
            "grid": [0.5, 1.0, 2.0],
            "seed": 5,
        }
        out = str(tmp / "curves")
        assert _run("curves", cfg, out, tmp) == 0
        for name in PRIMARY["curves"]:
            assert os.path.exists(os.path.join(out, name))
        rows = _read_curve(os.path.join(out, "theta.csv"))
        assert [r["t_hours"] for r in rows] == ["0.5", "1.0", "2.0"]
        for r in rows:
            assert float(r["lo"]) <= float(r["estimate"]) <= float(r["hi"])

    def test_shift_zero_delta_zero_difference(self, pipeline):
        tmp, sim_out, fit_out, _ = pipeline
        cfg = {
            "data": os.path.join(sim_out, "data.csv"),
            "schema": os.path.join(sim_out, "schema.json"),
            "fit": os.path.join(fit_out, "fit.json"),
            "deltas_minutes": [-15.0, 0.0, 15.0],
            "seed": 5,
        }
        out = str(tmp / "shift")
        assert _run("shift", cfg, out, tmp) == 0
        with open(os.path.join(out, "shift.json"), encoding="utf-8") as fh:
            doc = json.load(fh)
        by_delta = {e["delta_minutes"]: e for e in doc["entries"]}
        assert by_delta[0.0]["dtheta"] == 0.0
        assert by_delta[0.0]["dgamma"] == 0.0

    def test_sensitivity_neutral_matches_curves(self, pipeline):
        tmp, sim_out, _, _ = pipeline
        sens_cfg = {
            "data": os.path.join(sim_out, "data.csv"),
            "schema": os.path.join(sim_out, "schema.json"),
            "controls": FIT_CONTROLS,
            "psi0": [1.0],
            "psi1": [1.0],
            "times_hours": [0.5, 2.0],
            "seed": 5,
        }
        out = str(tmp / "sens")
        assert _run("sensitivity", sens_cfg, out, tmp) == 0
        rows = _read_curve(os.path.join(out, "sensitivity.csv"))
        assert len(rows) == 2

        # same fit controls: gamma values must match the curves command
        fit_cfg = {
            "data": os.path.join(sim_out, "data.csv"),
            "schema": os.path.join(sim_out, "schema.json"),
            "controls": FIT_CONTROLS,
            "seed": 5,
        }
        fit_out = str(tmp / "fit_for_sens")
        assert _run("fit", fit_cfg, fit_out, tmp) == 0
        curves_cfg = {
            "data": os.path.join(sim_out, "data.csv"),
            "schema": os.path.join(sim_out, "schema.json"),
            "fit": os.path.join(fit_out, "fit.json"),
            "grid": [0.5, 2.0],
            "seed": 5,
        }
        curves_out = str(tmp / "curves_for_sens")
        assert _run("curves", curves_cfg, curves_out, tmp) == 0
        gamma = _read_curve(os.path.join(curves_out, "gamma.csv"))
        for sens_row, gamma_row in zip(rows, gamma):
            assert float(sens_row["estimate"]) == pytest.approx(
                float(gamma_row["estimate"]), abs=1e-12
            )


class TestDeterminism:
    def test_rerun_byte_identical(self, pipeline, tmp_path):
        tmp, sim_out, _, fit_cfg = pipeline
        out_a, out_b = str(tmp_path / "a"), str(tmp_path / "b")
        assert _run("fit", fit_cfg, out_a, tmp_path) == 0
        assert _run("fit", fit_cfg, out_b, tmp_path, extra=["--threads", "2"]) == 0
        for name in ("fit.json", "trace.csv", "config_echo.json"):
            assert filecmp.cmp(os.path.join(out_a, name), os.path.join(out_b, name),
                               shallow=False), name

    def test_config_echo_round_trip(self, pipeline, tmp_path):
        tmp, sim_out, fit_out, _ = pipeline
        echo_path = os.path.join(fit_out, "config_echo.json")
        out = str(tmp_path / "echo_rerun")
        assert cli.main(["fit", "--config", echo_path, "--out", out]) == 0
        assert filecmp.cmp(os.path.join(fit_out, "fit.json"),
                           os.path.join(out, "fit.json"), shallow=False)


class TestExitCodes:
    def test_unknown_key_is_config_error(self, tmp_path, capsys):
        rc = _run("simulate", {"scenario": "reference", "n": 10, "bogus": 1},
                  str(tmp_path / "o"), tmp_path)
        assert rc == 2
        assert 'kind=config' in capsys.readouterr().err

    def test_missing_data_file_is_io_error(self, tmp_path, capsys):
        cfg = {
            "data": str(tmp_path / "nope.csv"),
            "schema": {"x": [{"name": "x1", "kind": "continuous"}],
                       "z": [{"name": "z1", "kind": "binary"}],
                       "t": "t", "a": "a", "y": "y"},
        }
        rc = _run("fit", cfg, str(tmp_path / "o2"), tmp_path)
        assert rc == 4
        assert 'kind=io' in capsys.readouterr().err

    def test_bad_json_is_config_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json", encoding="utf-8")
        rc = cli.main(["fit", "--config", str(bad), "--out", str(tmp_path / "o3")])
        assert rc == 2
        err = capsys.readouterr().err
        assert err.startswith("thresholdcurves: error code=2")
