import csv
import subprocess
import sys
from pathlib import Path

import pytest

from bppolab.cli import (EXIT_DATA, EXIT_OK, EXIT_USAGE, EXIT_VERIFY, ablation_grid, main)
from bppolab.pipeline import ConfigError, RunConfig, loads_config, parse_overrides

ROOT = Path(__file__).resolve().parents[1]
DESK_TABULAR = str(ROOT / "configs" / "desk_tabular.cfg")
QUICK = ["--set", "steps=30", "--set", "episodes=20", "--set", "horizon=20"]


def read_metrics(path):
    lines = Path(path).read_text().splitlines()
    assert lines[0] == "# bppolab-metrics v1"
    return list(csv.DictReader(lines[1:]))


# --- config ------------------------------------------------------------------------------

def test_config_round_trip():
    cfg = RunConfig(world="point-reach", lr=3e-4, steps=7)
    assert loads_config(cfg.dumps()) == cfg


def test_config_rejects_unknown_key_with_line():
    with pytest.raises(ConfigError, match=r"cfg:2: unknown config key 'learning_rate'"):
        loads_config("steps=5\nlearning_rate=1\n", source="cfg")


def test_config_rejects_bad_value():
    with pytest.raises(ConfigError, match="steps"):
        parse_overrides([(1, "steps=many")])


def test_desk_configs_parse():
    for p in (ROOT / "configs").glob("*.cfg"):
        loads_config(p.read_text())


# --- gen-dataset -------------------------------------------------------------------------

def test_gen_dataset_is_reproducible(tmp_path):
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    for p in (a, b):
        assert main(["gen-dataset", "--env", "tabular-grid", "--episodes", "100", "--seed", "7",
                     "--out", str(p)]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()


def test_gen_dataset_missing_env_is_usage_error(capsys):
    assert main(["gen-dataset", "--episodes", "3"]) == EXIT_USAGE


def test_gen_dataset_zero_episodes(tmp_path, capsys):
    code = main(["gen-dataset", "--env", "tabular-grid", "--episodes", "0",
                 "--out", str(tmp_path / "x.txt")])
    assert code == EXIT_DATA
    assert "n_episodes" in capsys.readouterr().err


def test_gen_dataset_unknown_env(tmp_path):
    assert main(["gen-dataset", "--env", "atari", "--out", str(tmp_path / "x")]) == EXIT_USAGE


def test_default_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("BPPOLAB_OUT", str(tmp_path / "root"))
    assert main(["gen-dataset", "--env", "tabular-bandit", "--episodes", "2", "--horizon", "3"]) == EXIT_OK
    assert (tmp_path / "root" / "tabular-bandit-s0.dataset").exists()


# --- train ----------------------------------------------------------------------------------

def test_train_improves_over_cloning(tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--config", DESK_TABULAR, "--seed", "1", "--out", str(out)]) == EXIT_OK
    rows = read_metrics(out / "metrics.csv")
    j0 = float(next(r["value"] for r in rows if r["metric"] == "J_initial"))
    jk = float(next(r["value"] for r in rows if r["metric"] == "J_final"))
    assert jk > j0
    for name in ("config.cfg", "trace-replacement.csv", "policy.ckpt", "bc_policy.ckpt"):
        assert (out / name).exists()
    assert {r["stage"] for r in rows} == {"bc", "q", "v", "improve"}


def test_train_rerun_is_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert main(["train", "--config", DESK_TABULAR, "--seed", "3", *QUICK,
                     "--out", str(tmp_path / d)]) == EXIT_OK
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_onestep_trace_keeps_fixed_anchor(tmp_path):
    assert main(["train", "--config", DESK_TABULAR, *QUICK, "--out", str(tmp_path)]) == EXIT_OK
    assert main(["train", "--config", DESK_TABULAR, *QUICK, "--variant", "onestep",
                 "--out", str(tmp_path)]) == EXIT_OK
    full = (tmp_path / "trace-replacement.csv").read_text()
    one = list(csv.DictReader((tmp_path / "trace-onestep.csv").read_text().splitlines()))
    assert full != (tmp_path / "trace-onestep.csv").read_text()
    assert {r["anchor"] for r in one} == {"0"}


def test_train_with_saved_dataset(tmp_path):
    ds = tmp_path / "d.txt"
    assert main(["gen-dataset", "--env", "tabular-random", "--episodes", "10", "--horizon", "10",
                 "--out", str(ds)]) == EXIT_OK
    assert main(["train", "--config", DESK_TABULAR, "--set", "steps=5", "--dataset", str(ds),
                 "--out", str(tmp_path / "r")]) == EXIT_OK


def test_train_unknown_override(tmp_path, capsys):
    assert main(["train", "--set", "warp=9", "--out", str(tmp_path)]) == EXIT_DATA
    assert "warp" in capsys.readouterr().err


# --- evaluate --------------------------------------------------------------------------------

def test_evaluate_tabular_is_exact(tmp_path, capsys):
    assert main(["train", "--config", DESK_TABULAR, *QUICK, "--out", str(tmp_path)]) == EXIT_OK
    capsys.readouterr()
    assert main(["evaluate", "--config", DESK_TABULAR, "--checkpoint",
                 str(tmp_path / "policy.ckpt"), "--out", str(tmp_path / "ev")]) == EXIT_OK
    assert "+- 0 " in capsys.readouterr().out
    rows = list(csv.DictReader((tmp_path / "ev" / "evaluation.csv").read_text().splitlines()))
    assert len(rows) == 5 and all(float(r["se"]) == 0.0 for r in rows)


def test_evaluate_continuous_summarizes_all_episodes(tmp_path, capsys):
    from bppolab.models import GaussianMlpPolicy, save_model
    import numpy as np
    save_model(tmp_path / "p.ckpt", GaussianMlpPolicy(2, 2, (8,), np.random.default_rng(0)))
    assert main(["evaluate", "--world", "point-reach", "--checkpoint", str(tmp_path / "p.ckpt"),
                 "--seeds", "0,1,2,3,4", "--episodes", "10"]) == EXIT_OK
    assert "(n=50)" in capsys.readouterr().out


def test_evaluate_missing_checkpoint(tmp_path, capsys):
    assert main(["evaluate", "--checkpoint", str(tmp_path / "nope.ckpt")]) == EXIT_DATA
    assert "nope.ckpt" in capsys.readouterr().err


# --- verify ------------------------------------------------------------------------------------

def test_verify_report_lines(tmp_path, capsys):
    assert main(["verify", "--suite", "theorem1", "--cases", "1000", "--quiet",
                 "--out", str(tmp_path)]) == EXIT_OK
    lines = (tmp_path / "verify_report.csv").read_text().splitlines()
    assert len(lines) == 1001 and lines[0] == "suite,case,lhs,rhs,slack,pass"
    assert "theorem1: 1000 cases, 0 failures" in capsys.readouterr().out


def test_verify_prints_one_line_per_case(capsys):
    assert main(["verify", "--suite", "lemma1", "--cases", "7"]) == EXIT_OK
    out = capsys.readouterr().out
    assert sum(line.startswith("[lemma1 ") for line in out.splitlines()) == 7


def test_verify_self_test_fails():
    assert main(["verify", "--suite", "theorem3", "--cases", "20", "--quiet",
                 "--self-test-fail"]) == EXIT_VERIFY


# --- ablate ------------------------------------------------------------------------------------

def test_ablation_grid_size():
    assert len(ablation_grid(seeds=(0, 1, 2))) == 5 * 5 * 3 * 3


def test_ablate_dry_run_subset(capsys):
    assert main(["ablate", "--dry-run", "--eps0", "0.1,0.2", "--sigma", "1.0",
                 "--omega", "0.9", "--seeds", "0,1"]) == EXIT_OK
    assert capsys.readouterr().out.splitlines()[0] == "4 runs"


def test_ablate_csv_rows(tmp_path):
    assert main(["ablate", "--config", DESK_TABULAR, "--set", "steps=6", "--set", "episodes=10",
                 "--eps0", "0.1,0.25", "--sigma", "0.96", "--omega", "0.5,0.9", "--seeds", "0",
                 "--workers", "2", "--out", str(tmp_path)]) == EXIT_OK
    rows = (tmp_path / "ablation.csv").read_text().splitlines()
    assert len(rows) - 1 == 4 * 6


# --- entry points --------------------------------------------------------------------------------

def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "bppolab", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("gen-dataset", "train", "evaluate", "verify", "ablate"):
        assert cmd in res.stdout
