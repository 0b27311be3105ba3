import csv
import json
import os
import time
from pathlib import Path

import pytest
import yaml

from bdmhj.cli import EXIT_CONFIG, EXIT_IO, EXIT_NUMERICAL, EXIT_OK, main
from bdmhj.config import emit, parse_and_validate
from bdmhj.errors import ConfigError

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SMOKE = CONFIGS / "smoke.yaml"


def minimal():
    const = lambda v: {"preset": "constant", "value": v}
    return {"model": {"rates": {"b": const(2.0), "d": const(1.0), "p": const(1.0)}, "scaling": {"K": 1e4}}}


def error_keys(exc):
    return {k for k, _ in exc.value.errors}


def test_minimal_config_gets_defaults():
    cfg = parse_and_validate(minimal())
    assert cfg.seed == 0
    d = cfg.data
    assert d["model"]["kernel"] == {"type": "gaussian", "sigma": 1.0}
    assert d["model"]["scaling"]["m"] == 11
    assert d["model"]["scaling"]["a"] == 0.4
    assert d["harness"]["K_ladder"] == [1e3, 1e4, 1e5]
    assert d["process"]["method"] == "exact"
    assert cfg.model_spec(quiet=True).m == 11


def test_delta_K_must_give_integer_m():
    data = minimal()
    data["model"]["scaling"]["delta_K"] = 0.3
    with pytest.raises(ConfigError) as e:
        parse_and_validate(data)
    assert "model.scaling.m" in error_keys(e)
    data["model"]["scaling"]["delta_K"] = 0.125
    assert parse_and_validate(data).data["model"]["scaling"]["m"] == 8


def test_all_errors_reported():
    data = minimal()
    data["harness"] = {"replicates": -1}
    data["process"] = {"T": -0.5}
    data["model"]["scaling"]["K"] = "big"
    with pytest.raises(ConfigError) as e:
        parse_and_validate(data)
    keys = error_keys(e)
    assert {"harness.replicates", "process.T", "model.scaling.K"} <= keys


def test_missing_key_named():
    data = minimal()
    del data["model"]["rates"]["p"]
    with pytest.raises(ConfigError) as e:
        parse_and_validate(data)
    assert any("model.rates" in k for k in error_keys(e))


def test_unreadable_and_malformed(tmp_path):
    with pytest.raises(ConfigError):
        parse_and_validate(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("model: [unclosed\n")
    with pytest.raises(ConfigError):
        parse_and_validate(bad)


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.yaml")), ids=lambda p: p.name)
def test_emit_is_a_fixed_point(path):
    first = parse_and_validate(path)
    second = parse_and_validate(yaml.safe_load(emit(first)))
    assert second.data == first.data
    assert emit(second) == emit(first)
    assert second.digest() == first.digest()


# -- command line

def run(*argv):
    return main([str(a) for a in argv])


def test_check_exit_zero(tmp_path, capsys):
    assert run("check", "--config", SMOKE, "--out", tmp_path) == EXIT_OK
    assert "supercritical" in capsys.readouterr().out
    assert (tmp_path / "assumptions.csv").exists() and (tmp_path / "riemann.csv").exists()
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["exit_status"] == 0 and man["command"] == "check"
    assert man["seed"] == 1 and len(man["config_sha256"]) == 64
    assert {"numpy", "scipy", "numba"} <= set(man["versions"])
    assert sorted(man["outputs"]) == ["assumptions.csv", "riemann.csv"]


def test_solve_cfl_violation_exit_three(tmp_path):
    assert run("solve", "--config", SMOKE, "--out", tmp_path, "--dt", "1.0") == EXIT_NUMERICAL
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["exit_status"] == 3 and "CFLViolationError" in man["error"]


def test_solve_writes_solution(tmp_path):
    assert run("solve", "--config", SMOKE, "--out", tmp_path, "--n", "64", "--T", "0.2",
               "--snapshots", "0.1") == EXIT_OK
    with open(tmp_path / "hj_solution.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3 * 64
    last = [float(r["beta"]) for r in rows if float(r["t"]) == 0.2]
    assert max(abs(v - 0.9) for v in last) < 1e-12


def test_bad_config_exit_two(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text(yaml.safe_dump({"model": {"scaling": {"K": -5}}}))
    assert run("check", "--config", cfg, "--out", tmp_path / "o") == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "model.rates" in err or "rates" in err


def test_unwritable_output_exit_four(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert run("solve", "--config", SMOKE, "--out", blocker / "sub", "--n", "32", "--T", "0.01") == EXIT_IO


def test_output_dir_precedence(tmp_path, monkeypatch):
    env_dir = tmp_path / "env"
    monkeypatch.setenv("BDMHJ_OUT", str(env_dir))
    assert run("check", "--config", SMOKE) == EXIT_OK
    assert (env_dir / "manifest.json").exists()
    flag_dir = tmp_path / "flag"
    assert run("check", "--config", SMOKE, "--out", flag_dir) == EXIT_OK
    assert (flag_dir / "manifest.json").exists()


def _tree(root):
    return {p for p in Path(root).rglob("*")}


def test_simulate_writes_only_under_out(tmp_path, monkeypatch):
    work = tmp_path / "work"
    work.mkdir()
    cfg = work / "smoke.yaml"
    cfg.write_text(SMOKE.read_text())
    monkeypatch.chdir(work)
    monkeypatch.delenv("BDMHJ_OUT", raising=False)
    before = _tree(tmp_path)
    out = tmp_path / "out"
    assert run("simulate", "--config", cfg, "--out", out, "--replicates", "2",
               "--snapshot-times", "0.05") == EXIT_OK
    new = _tree(tmp_path) - before
    assert new and all(out in p.parents or p == out for p in new)
    names = {p.name for p in out.iterdir()}
    assert {"replicate_0000.csv", "replicate_0001.csv", "events_summary.csv", "manifest.json"} <= names
    with open(out / "replicate_0000.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["t_rescaled", "site", "count"]
    assert {float(r["t_rescaled"]) for r in rows} == {0.0, 0.05, 0.1}
    with open(out / "events_summary.csv") as fh:
        summ = list(csv.DictReader(fh))
    assert [r["replicate"] for r in summ] == ["0", "1"]
    assert {"n_events", "wall_time_s", "truncated"} <= set(summ[0])


def test_simulate_tau_leap(tmp_path):
    assert run("simulate", "--config", SMOKE, "--out", tmp_path, "--tau-leap", "--seed", "3") == EXIT_OK
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["seed"] == 3


def test_simulate_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert run("simulate", "--config", SMOKE, "--out", tmp_path / name) == EXIT_OK
    assert (tmp_path / "a" / "replicate_0000.csv").read_bytes() == (tmp_path / "b" / "replicate_0000.csv").read_bytes()


def test_compare_smoke_under_a_minute(tmp_path):
    t0 = time.perf_counter()
    assert run("compare", "--config", SMOKE, "--out", tmp_path) == EXIT_OK
    assert time.perf_counter() - t0 < 60
    with open(tmp_path / "summary.csv") as fh:
        (row,) = list(csv.DictReader(fh))
    assert row["K"] == "500.0" and row["n_valid_replicates"] == "2"


def test_compare_rejects_unknown_plot(tmp_path):
    assert run("compare", "--config", SMOKE, "--out", tmp_path, "--plots", "histogram") == EXIT_CONFIG
