"""Experiment runner: config resolution, artifacts, exit codes."""

import filecmp
import json

import pytest

from loclab.cli import ConfigError, config_digest, main, resolve_config

EMPTY_WINDOW_MODEL = {
    "background": {"kind": "zero"},
    "single_site": {"kind": "indicator"},
    "coupling": {"kind": "uniform", "lo": 0.0, "hi": 1.0},
    "e_max": 0.3,
}


def test_resolve_config_precedence():
    cfg = resolve_config("identities")
    assert cfg.parameters["count"] == 20
    assert cfg.parameters["seed"] == 1
    cfg = resolve_config("identities", {"parameters": {"count": 7, "seed": 4}})
    assert cfg.parameters["count"] == 7
    assert cfg.parameters["seed"] == 4
    # flags override the file, untouched keys keep file values
    cfg = resolve_config("identities", {"parameters": {"count": 7, "seed": 4}},
                         {"samples": 3})
    assert cfg.parameters["count"] == 3
    assert cfg.parameters["seed"] == 4
    assert cfg.scenario == "identities"


def test_resolve_config_rejects_bad_input():
    with pytest.raises(ConfigError, match="unknown scenario"):
        resolve_config("nonsense")
    with pytest.raises(ConfigError, match="unknown config key"):
        resolve_config("identities", {"bogus": 1})
    with pytest.raises(ConfigError, match="unknown parameter 'bogus_key'"):
        resolve_config("spectrum", {"parameters": {"bogus_key": 1}})
    with pytest.raises(ConfigError, match="not 'spectrum'"):
        resolve_config("spectrum", {"scenario": "identities"})
    with pytest.raises(ConfigError, match="does not accept --workers"):
        resolve_config("spectrum", overrides={"workers": 2})


def test_config_digest_stable_and_sensitive():
    a = config_digest(resolve_config("spectrum"))
    b = config_digest(resolve_config("spectrum"))
    assert a == b
    assert len(a) == 16
    c = config_digest(resolve_config("spectrum", {"parameters": {"tol": 1e-9}}))
    assert c != a
    # the output directory does not enter the digest
    d = config_digest(resolve_config("spectrum", {"output_dir": "elsewhere"}))
    assert d == a


def test_identities_scenario_end_to_end(tmp_path, capsys):
    out = tmp_path / "run"
    rc = main(["identities", "--samples", "5", "--out", str(out)])
    assert rc == 0
    text = capsys.readouterr().out
    assert "[pass] phase-derivative-identities" in text
    assert "config hash" in text
    report = json.loads((out / "identities_report.json").read_text())
    assert report["schema"] == "loclab/v1"
    assert report["parameters"]["count"] == 5
    assert all(c["passed"] for c in report["checks"])
    csv_lines = (out / "identities_derivatives.csv").read_text().splitlines()
    assert csv_lines[0].startswith("# loclab/v1 scenario=identities")
    assert csv_lines[1].startswith("# config=")
    assert csv_lines[2].split(",")[0] == "instance"
    assert len(csv_lines) == 3 + 5


def test_rerun_is_byte_identical(tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(["identities", "--samples", "4", "--out", str(out1)]) == 0
    assert main(["identities", "--samples", "4", "--out", str(out2)]) == 0
    names = sorted(p.name for p in out1.iterdir())
    assert names == sorted(p.name for p in out2.iterdir())
    match, mismatch, errors = filecmp.cmpfiles(out1, out2, names, shallow=False)
    assert mismatch == [] and errors == []
    assert match == names


def test_bound_check_scenario(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "scenario": "bound-check",
        "parameters": {"nodes": 6, "m": 120},
    }))
    out = tmp_path / "run"
    rc = main(["bound-check", "--config", str(cfg), "--out", str(out)])
    assert rc == 0
    text = capsys.readouterr().out
    assert "[pass]" in text and "FAIL" not in text
    rows = (out / "bound-check_bound.csv").read_text().splitlines()[3:]
    assert len(rows) == 2
    n1 = rows[0].split(",")
    assert float(n1[1]) <= float(n1[2])


def test_large_coupling_scenario(tmp_path, capsys):
    out = tmp_path / "run"
    rc = main(["large-coupling", "--samples", "2", "--out", str(out)])
    assert rc == 0
    assert "[pass] amplitude-growth" in capsys.readouterr().out
    rows = (out / "large-coupling_amplitude.csv").read_text().splitlines()[3:]
    assert len(rows) == 6  # 2 anchors x 3 coupling strengths


def test_spectrum_empty_window_writes_header_only(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "scenario": "spectrum",
        "model": EMPTY_WINDOW_MODEL,
        "parameters": {"L": 2},
    }))
    out = tmp_path / "run"
    rc = main(["spectrum", "--config", str(cfg), "--out", str(out)])
    assert rc == 0
    lines = (out / "spectrum_eigenvalues.csv").read_text().splitlines()
    assert len(lines) == 3  # schema, digest, column header, no rows
    report = json.loads((out / "spectrum_report.json").read_text())
    assert all(c["passed"] for c in report["checks"])


def test_config_errors_exit_2(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "scenario": "spectrum",
        "model": {"background": {"kind": "zero"},
                  "single_site": {"kind": "indicator"},
                  "coupling": {"kind": "uniform"}},
    }))
    rc = main(["spectrum", "--config", str(cfg), "--out", str(tmp_path / "x")])
    assert rc == 2
    err = capsys.readouterr().err
    assert "config error" in err and "e_max" in err

    rc = main(["spectrum", "--workers", "2", "--out", str(tmp_path / "y")])
    assert rc == 2
    assert "does not accept --workers" in capsys.readouterr().err

    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    rc = main(["spectrum", "--config", str(bad)])
    assert rc == 2
    assert "config error" in capsys.readouterr().err
