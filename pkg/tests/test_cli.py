import json
import math
import os
import shutil
from pathlib import Path

import pytest

from fracheat.cli import dumps_report, main
from fracheat.config import from_dict, load_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

BASE = """
[operator]
variant = "fractional"
alpha = 1.5

[grid]
R = 1.0
N = {N}

[noise]
kind = "white"

[simulation]
xi = 1.0
dt = 1e-2
T = 0.2
M = 64
seed = 5
record_times = [0.1, 0.2]
moment_orders = [2, 4]

[analysis]
xis = [1.0, 2.5]
oracle_dt = 0.05
oracle_T = 4.0
tol = 0.5
lemmas = [
  {{ id = "L21", beta_mu1 = 0.5, points = [0.0] }},
  {{ id = "L21", beta_mu1 = 1.5, points = [0.0] }},
]
"""


def write(tmp_path, text, name="run.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    return code, capsys.readouterr().err


@pytest.fixture
def cfg_path(tmp_path):
    return write(tmp_path, BASE.format(N=32))


def test_operator_info_laplacian(tmp_path, capsys):
    code, _ = run(capsys, "operator-info", "--config", CONFIGS / "laplacian.toml", "--out", tmp_path)
    assert code == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["results"]["spectrum"]["mu1_extrapolated"] == pytest.approx(math.pi**2 / 4, rel=1e-2)
    assert (tmp_path / "spectrum.csv").read_text().startswith("k,eigenvalue\n")
    assert "Principal Dirichlet eigenvalue" in (tmp_path / "summary.txt").read_text()


def test_lemma_check_reports_violated_hypothesis(cfg_path, tmp_path, capsys):
    code, _ = run(capsys, "lemma-check", "--config", cfg_path, "--out", tmp_path / "o")
    assert code == 0
    lemmas = json.loads((tmp_path / "o" / "report.json").read_text())["results"]["lemmas"]
    assert [l["verdict"] for l in lemmas] == ["finite", "hypothesis-violated"]
    assert (tmp_path / "o" / "lemmas.csv").exists()


def test_dalang_violation_exits_4(tmp_path, capsys):
    code, err = run(capsys, "simulate", "--config", CONFIGS / "dalang_fail.toml", "--out", tmp_path)
    assert code == 4
    assert json.loads(err)["exit_code"] == 4
    assert not (tmp_path / "report.json").exists()


@pytest.mark.parametrize("patch", [
    ("alpha = 1.5", "alpha = 2.5"),
    ("M = 64", "M = 0"),
    ("seed = 5", "seed = -1"),
    ("[noise]", "[nosie]"),
    ('kind = "white"', 'kind = "pink"'),
])
def test_invalid_config_exits_2(tmp_path, capsys, patch):
    p = write(tmp_path, BASE.format(N=32).replace(*patch))
    code, err = run(capsys, "simulate", "--config", p, "--out", tmp_path / "o")
    assert code == 2
    assert "error" in json.loads(err)


def test_unwritable_output_exits_3(cfg_path, tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    code, err = run(capsys, "operator-info", "--config", cfg_path, "--out", blocker / "sub")
    assert code == 3
    assert json.loads(err)["exit_code"] == 3


def test_simulate_outputs_and_round_trip(cfg_path, tmp_path, capsys):
    out = tmp_path / "sim"
    assert run(capsys, "simulate", "--config", cfg_path, "--out", out)[0] == 0
    text = (out / "report.json").read_text()
    rep = json.loads(text)
    assert dumps_report(rep) == text
    assert rep["config_hash"] == load_config(cfg_path).config_hash
    header = (out / "moments.csv").read_text().splitlines()[0]
    assert header == "t,x,p,moment,stderr,M_effective"
    summary = (out / "summary.txt").read_text()
    assert "Theorem 1.3 dichotomy" in summary and "Corollary 1.4 energy sandwich" in summary


def test_seed_override_changes_results(cfg_path, tmp_path, capsys):
    run(capsys, "simulate", "--config", cfg_path, "--out", tmp_path / "a")
    run(capsys, "simulate", "--config", cfg_path, "--out", tmp_path / "b", "--seed", 6)
    a = json.loads((tmp_path / "a" / "report.json").read_text())
    b = json.loads((tmp_path / "b" / "report.json").read_text())
    assert b["config"]["simulation"]["seed"] == 6
    assert a["config_hash"] != b["config_hash"]
    assert (tmp_path / "a" / "moments.csv").read_text() != (tmp_path / "b" / "moments.csv").read_text()


def test_thread_env_does_not_change_output(cfg_path, tmp_path, capsys, monkeypatch):
    run(capsys, "simulate", "--config", cfg_path, "--out", tmp_path / "a", "--threads", 1)
    monkeypatch.setenv("FRACHEAT_THREADS", "4")
    run(capsys, "simulate", "--config", cfg_path, "--out", tmp_path / "b")
    for name in ("report.json", "moments.csv", "summary.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_sweep_and_oracle_files(cfg_path, tmp_path, capsys):
    assert run(capsys, "sweep", "--config", cfg_path, "--out", tmp_path / "s")[0] == 0
    for name in ("report.json", "phase.csv", "moments.csv", "summary.txt"):
        assert (tmp_path / "s" / name).exists()
    phase = json.loads((tmp_path / "s" / "report.json").read_text())["results"]["phase"]
    assert phase["status"] == "crossover bracketed"
    assert run(capsys, "oracle", "--config", cfg_path, "--out", tmp_path / "o")[0] == 0
    assert (tmp_path / "o" / "moments.csv").read_text().startswith("t,x,p,value,stderr,provenance\n")


def test_kernel_verify(cfg_path, tmp_path, capsys):
    assert run(capsys, "kernel-verify", "--config", cfg_path, "--out", tmp_path)[0] == 0
    res = json.loads((tmp_path / "report.json").read_text())["results"]
    assert res["max_mass"] <= 1 + 1e-8
    assert res["chapman_kolmogorov_error"] <= 1e-9


def test_config_hash_ignores_layout_and_order():
    raw = {"operator": {"alpha": 1.5, "variant": "fractional"}, "grid": {"N": 16, "R": 1.0},
           "noise": {"kind": "white"}}
    reordered = {"noise": {"kind": "white"}, "grid": {"R": 1.0, "N": 16},
                 "operator": {"variant": "fractional", "alpha": 1.5}}
    assert from_dict(raw).config_hash == from_dict(reordered).config_hash
    changed = dict(raw, grid={"N": 18, "R": 1.0})
    assert from_dict(changed).config_hash != from_dict(raw).config_hash
    moved = dict(raw, output={"dir": "elsewhere"})
    assert from_dict(moved).config_hash == from_dict(raw).config_hash


def test_config_whitespace_does_not_change_hash(tmp_path):
    a = write(tmp_path, BASE.format(N=32), "a.toml")
    b = write(tmp_path, "# comment\n" + BASE.format(N=32).replace("\n", "\n\n").replace(" = ", "="), "b.toml")
    assert load_config(a).config_hash == load_config(b).config_hash
