import csv
import json
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from codazzi_lab.cli import REPORT_SCHEMA, THREADS_ENV, main, run, run_command, write_csv
from codazzi_lab.config import RunConfig, dumps, export_example, load, loads
from codazzi_lab.errors import ConfigError
from codazzi_lab.gallery import NAMED


def strip_time(report):
    report = dict(report)
    report.pop("wall_time")
    return report


def example(name, n=7, **tols):
    cfg = RunConfig.from_example(name)
    cfg.grid = type(cfg.grid).uniform(n, cfg.chart.dim, cfg.grid.margin)
    cfg.tolerances.update(tols)
    return cfg


@pytest.mark.parametrize("command, name, code", [
    ("verify-codazzi", "torus", 0),
    ("verify-codazzi", "inconsistent_warp", 0),
    ("analyze-eigen", "time_family", 0),
    ("check-conditions", "warped_consistent", 0),
    ("check-conditions", "torus", 0),
    ("check-conditions", "flat", 1),
    ("detect-warped", "torus", 0),
    ("detect-warped", "flat", 0),
    ("detect-warped", "inconsistent_warp", 0),
])
def test_exit_codes(command, name, code):
    report, exit_code = run(command, example(name))
    assert exit_code == code, report
    jsonschema.validate(report, REPORT_SCHEMA)
    assert report["passed"] == (code == 0)


def test_broken_tensor_fails_codazzi():
    text = """
[chart]
coords = t, x, y
domain = 0 1; 0 1; 0 1
[g]
tt = 1
xx = 1
yy = 1
[A]
tt = 2
xx = 1 + x*t
yy = 1
[grid]
n = 5
"""
    report, code = run("verify-codazzi", loads(text))
    assert code == 1
    assert report["checks"][0]["max"] > 1e-3


def test_domain_failures_are_excluded_and_counted():
    cfg = loads("[source]\nlambda = 1\nmu = ln(x)\n[chart]\ncoords = t, x, y\n"
                "domain = 0 1; 1 2; 1 2\n[grid]\nn = 5\n")
    cfg.g_texts = dict(cfg.g_texts, tt="1/(x - 1.5)")
    report, code = run("verify-codazzi", cfg)
    assert report["excluded_points"] == 75
    assert report["checks"][0]["n_points"] == 50
    jsonschema.validate(report, REPORT_SCHEMA)


def test_collision_in_config_exits_two(tmp_path, capsys):
    path = tmp_path / "bad.ini"
    path.write_text("[source]\nlambda = 1\nmu = 1 + x\n[chart]\ncoords = t, x, y\n"
                    "domain = 0 1; -1 1; 1 2\n[grid]\nn = 5\n")
    assert main(["verify-codazzi", "--config", str(path)]) == 2
    assert "collision" in capsys.readouterr().err


def test_reports_are_deterministic():
    a = run_command("detect-warped", example("inconsistent_warp"))
    b = run_command("detect-warped", example("inconsistent_warp"))
    assert strip_time(a) == strip_time(b)


def test_report_has_no_nan_and_is_strict_json():
    report = run_command("detect-warped", example("torus"))
    text = json.dumps(report, allow_nan=False)
    assert json.loads(text) == report


@pytest.mark.parametrize("name", sorted(NAMED))
def test_config_round_trip(name):
    cfg = RunConfig.from_example(name)
    again = loads(dumps(cfg))
    assert again.echo() == cfg.echo()
    assert loads(export_example(name)).echo() == cfg.echo()


def test_round_trip_gives_identical_report(tmp_path):
    path = tmp_path / "torus.ini"
    path.write_text(export_example("torus"))
    cfg = load(path)
    cfg.grid = example("torus").grid
    a = run_command("check-conditions", cfg)
    b = run_command("check-conditions", example("torus"))
    assert strip_time(a) == strip_time(b)


@pytest.mark.parametrize("text, field, line", [
    ("[source]\nexample = torus\n[grid]\nn = 3\n", "grid.n", 4),
    ("[source]\nexample = torus\n[tolerances]\ncodazzi = -1\n", "tolerances.codazzi", 4),
    ("[source]\nexample = torus\n[tolerances]\nbogus = 1\n", "tolerances.bogus", 4),
    ("[source]\nexample = torus\n[output]\nformat = xml\n", "output.format", 4),
    ("[source]\nexample = torus\nlambda = 1\nmu = x\n", "source", 1),
    ("[nonsense]\n", "nonsense", 1),
])
def test_config_errors_carry_field_and_line(text, field, line):
    with pytest.raises(ConfigError) as exc:
        loads(text)
    assert exc.value.field == field
    assert exc.value.line == line


def test_raw_source_needs_both_tensors():
    with pytest.raises(ConfigError):
        loads("[chart]\ncoords = t, x, y\ndomain = 0 1; 0 1; 0 1\n[g]\ntt = 1\nxx = 1\nyy = 1\n")


def test_csv_round_trip_is_exact(tmp_path, rng):
    vals = rng.standard_normal((20, 3)) * 10.0 ** rng.integers(-20, 20, (20, 3))
    path = tmp_path / "t.csv"
    write_csv(path, ["a", "b", "c"], vals.tolist())
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["a", "b", "c"]
    np.testing.assert_array_equal(np.array(rows[1:], dtype=float), vals)


def test_main_stdout_json(capsys):
    code = main(["verify-codazzi", "--example", "time_family", "--grid", "5"])
    out = capsys.readouterr()
    assert code == 0
    report = json.loads(out.out)
    jsonschema.validate(report, REPORT_SCHEMA)
    assert report["config"]["grid"]["counts"] == [5, 5, 5]
    assert "PASS" in out.err


def test_main_writes_both_formats(tmp_path, capsys):
    code = main(["detect-warped", "--example", "inconsistent_warp", "--grid", "7",
                 "--out", str(tmp_path), "--format", "both"])
    assert code == 0
    names = {p.name for p in tmp_path.iterdir()}
    assert {"detect_warped.json", "detect_warped_checks.csv"} <= names
    cert = [n for n in names if n.startswith("certificate")]
    assert cert
    report = json.loads((tmp_path / "detect_warped.json").read_text())
    assert report["results"]["verdict"]["verdict"] == "warped_candidate"
    with open(tmp_path / "detect_warped_checks.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == len(report["checks"])


def test_tolerance_override(capsys):
    code = main(["verify-codazzi", "--example", "torus", "--grid", "5", "--tol", "codazzi=1e-30"])
    assert code == 1
    report = json.loads(capsys.readouterr().out)
    assert report["checks"][0]["tolerance"] == 1e-30


@pytest.mark.parametrize("argv", [
    ["verify-codazzi", "--example", "torus", "--tol", "nonsense=1"],
    ["verify-codazzi", "--example", "torus", "--tol", "codazzi"],
    ["verify-codazzi", "--example", "torus", "--grid", "4"],
    ["verify-codazzi", "--example", "torus", "--probe", "1,2"],
    ["verify-codazzi"],
])
def test_bad_arguments_exit_two(argv, capsys):
    assert main(argv) == 2
    assert "error" in capsys.readouterr().err


def test_missing_config_file(tmp_path, capsys):
    assert main(["verify-codazzi", "--config", str(tmp_path / "nope.ini")]) == 2


def test_thread_limit_env(monkeypatch, capsys):
    monkeypatch.setenv(THREADS_ENV, "1")
    assert main(["verify-codazzi", "--example", "time_family", "--grid", "5"]) == 0
    monkeypatch.setenv(THREADS_ENV, "zero")
    assert main(["verify-codazzi", "--example", "time_family", "--grid", "5"]) == 2


def test_export_config(tmp_path, capsys):
    assert main(["export-config", "--example", "warped_consistent"]) == 0
    text = capsys.readouterr().out
    assert loads(text).echo() == RunConfig.from_example("warped_consistent").echo()
    assert main(["export-config", "--example", "torus", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "torus.ini").exists()


def test_characteristics_command():
    cfg = example("torus")
    cfg.characteristics = {"sweep": True, "expect": "violated"}
    cfg.tolerances["characteristics"] = 1e-2
    report, code = run("characteristics", cfg)
    assert code == 0, report


def test_expected_verdict_mismatch_fails():
    cfg = example("torus")
    cfg.expect = {"verdict": "warped_candidate"}
    _, code = run("detect-warped", cfg)
    assert code == 1


def test_reproduce_paper_chain(tmp_path, capsys):
    assert main(["reproduce-paper", "--out", str(tmp_path), "--format", "both"]) == 0
    report = json.loads((tmp_path / "reproduce_paper.json").read_text())
    jsonschema.validate(report, REPORT_SCHEMA)
    assert report["passed"] and report["config"] is None
    assert all(c["passed"] == c["expect_pass"] for c in report["checks"] if c["gate"])


def test_published_schema_matches():
    path = Path(__file__).resolve().parents[1] / "docs" / "report_schema.json"
    assert json.loads(path.read_text()) == REPORT_SCHEMA
    jsonschema.Draft202012Validator.check_schema(REPORT_SCHEMA)
