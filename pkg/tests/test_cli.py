import csv
import json

import pytest

from gcslab.cli import (EXIT_FAIL, EXIT_OK, EXIT_USAGE, ConfigError, main, parse_config_text,
                        resolve_config, summary_row)
from gcslab.analysis import BoundReport


def small_config(tmp_path, **scenario):
    sc = {"D": 3, "duration": 80.0}
    sc.update(scenario)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"scenario": sc, "seed": 2}))
    return str(path)


def read(path):
    return path.read_bytes()


def test_run_writes_trace_and_report(tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["run", "--preset", "uniform-line-d4", "--out-dir", str(out)]) == EXIT_OK
    assert "PASS" in capsys.readouterr().out
    doc = json.loads((out / "report.json").read_text())
    assert doc["passed"] and doc["reports"]
    assert (out / "trace.csv").exists() and (out / "trace.csv.meta.json").exists()


def test_mutated_preset_fails_with_named_checks(tmp_path, capsys):
    code = main(["run", "--preset", "uniform-line-d4-invert-fast", "--out-dir", str(tmp_path)])
    assert code == EXIT_FAIL
    out = capsys.readouterr().out
    assert "mode_matches_trigger" in out


def test_missing_config_is_usage_error(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "nope.json"), "--out-dir", str(tmp_path)]) == EXIT_USAGE
    assert "error" in capsys.readouterr().err


def test_unknown_field_is_usage_error(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"scenario": {"diameter": 3}}))
    assert main(["run", "--config", str(path), "--out-dir", str(tmp_path)]) == EXIT_USAGE
    assert "diameter" in capsys.readouterr().err


def test_syntax_error_has_position():
    with pytest.raises(ConfigError, match=r"2:"):
        parse_config_text('{\n  "seed": ,\n}', "x.json")


def test_presets_resolve():
    cfg = resolve_config({"preset": "external-line-d7"})
    assert cfg["scenario"]["kind"] == "external" and cfg["params"]["mu"] == 0.08
    with pytest.raises(ConfigError):
        resolve_config({"preset": "no-such-preset"})


def test_reruns_are_byte_identical(tmp_path):
    cfg = small_config(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", cfg, "--out-dir", str(a)]) == EXIT_OK
    assert main(["run", "--config", cfg, "--out-dir", str(b)]) == EXIT_OK
    for name in ("trace.csv", "trace.csv.meta.json", "report.json"):
        assert read(a / name) == read(b / name)


def test_verify_reproduces_the_run_report(tmp_path):
    cfg = small_config(tmp_path)
    out = tmp_path / "o"
    assert main(["run", "--config", cfg, "--out-dir", str(out)]) == EXIT_OK
    assert main(["verify", str(out / "trace.csv"), "--config", cfg, "--out-dir", str(out)]) == EXIT_OK
    run = json.loads((out / "report.json").read_text())
    ver = json.loads((out / "verify_report.json").read_text())
    assert run == ver


def test_tampered_trace_fails(tmp_path, capsys):
    cfg = small_config(tmp_path)
    out = tmp_path / "o"
    main(["run", "--config", cfg, "--out-dir", str(out)])
    path = out / "trace.csv"
    rows = list(csv.reader(path.open()))
    header = rows[0]
    k = header.index("L_2")
    mid = len(rows) // 2
    rows[mid][k] = repr(float(rows[mid][k]) + 5.0)
    with path.open("w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    capsys.readouterr()
    assert main(["verify", str(path), "--config", cfg, "--out-dir", str(out)]) == EXIT_FAIL
    assert "FAIL" in capsys.readouterr().out


def test_window_outside_trace_is_skipped(tmp_path):
    cfg = small_config(tmp_path)
    out = tmp_path / "o"
    main(["run", "--config", cfg, "--out-dir", str(out)])
    code = main(["verify", str(out / "trace.csv"), "--config", cfg, "--out-dir", str(out),
                 "--window", "500", "20"])
    assert code == EXIT_OK
    doc = json.loads((out / "verify_report.json").read_text())
    assert {c["status"] for r in doc["reports"] for c in r["checks"]} == {"skipped"}


def test_fingerprint_mismatch_is_usage_error(tmp_path, capsys):
    cfg = small_config(tmp_path)
    out = tmp_path / "o"
    main(["run", "--config", cfg, "--out-dir", str(out)])
    code = main(["verify", str(out / "trace.csv"), "--config", cfg, "--seed", "99",
                 "--out-dir", str(out)])
    assert code == EXIT_USAGE
    assert "fingerprint" in capsys.readouterr().err


def test_empty_sweep_prints_header_only(tmp_path, capsys):
    code = main(["sweep", "--preset", "uniform-line-d4", "--axis", "D", "--values", "",
                 "--out-dir", str(tmp_path / "sw")])
    assert code == EXIT_OK
    out = capsys.readouterr().out.strip().splitlines()
    assert len(out) == 1 and out[0].startswith("value")
    assert json.loads((tmp_path / "sw" / "sweep.json").read_text())["rows"] == []


def test_sweep_rejects_unknown_axis(tmp_path):
    assert main(["sweep", "--preset", "uniform-line-d4", "--axis", "colour", "--values", "1",
                 "--out-dir", str(tmp_path)]) == EXIT_USAGE


def test_sweep_rows(tmp_path, capsys):
    cfg = small_config(tmp_path, duration=40.0)
    code = main(["sweep", "--config", cfg, "--axis", "D", "--values", "2,3", "--jobs", "2",
                 "--out-dir", str(tmp_path)])
    assert code == EXIT_OK
    rows = json.loads((tmp_path / "sweep.json").read_text())["rows"]
    assert [r["value"] for r in rows] == [2.0, 3.0]
    assert all(r["passed"] and r["max_L"] <= r["local_formula"] for r in rows)


def test_summary_row_depends_only_on_reports():
    a = BoundReport("x", (0.0, 1.0), [], {"max_G": 1.0, "max_L": 0.5})
    b = BoundReport("x", (1.0, 2.0), [], {"max_G": 2.0, "max_L": 0.25, "t_stab": 3.0})
    row = summary_row(7, [a, b])
    assert row == summary_row(7, [a, b])
    assert row["max_G"] == 2.0 and row["max_L"] == 0.5 and row["t_stab"] == 3.0
    assert row["max_T"] is None and row["passed"]
