"""Command line interface: argument plumbing, file outputs, exit codes."""

import os

import numpy as np
import pytest

from causalworld import cli, harness
from causalworld.envs import ReplayBuffer


def run_cli(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


# ============================================================
# config
# ============================================================

def test_config_dump_matches_library_default(capsys):
    code, out, _ = run_cli(["config", "--dump"], capsys)
    assert code == 0
    assert out == harness.dump_config()
    # the dump must itself be loadable
    harness.parse_config(out)


def test_config_dump_file_roundtrip(tmp_path, capsys):
    cfg = harness.ExperimentConfig()
    cfg.run.seeds = (3, 9)
    cfg.model.d = 7
    path = tmp_path / "exp.ini"
    path.write_text(harness.dump_config(cfg))
    code, out, _ = run_cli(["config", "--dump", "--file", str(path)], capsys)
    assert code == 0
    got = harness.parse_config(out)
    assert got.run.seeds == (3, 9)
    assert got.model.d == 7


def test_config_without_dump_errors(capsys):
    code, _, err = run_cli(["config"], capsys)
    assert code == 2
    assert "config --dump" in err


def test_unknown_command_rejected(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 2


# ============================================================
# gen-env
# ============================================================

def test_gen_env_synthetic_spec_and_buffer(tmp_path, capsys):
    spec_path = tmp_path / "env.npz"
    buf_path = tmp_path / "env.buffer"
    code, out, _ = run_cli(
        ["gen-env", "--family", "synthetic", "--seed", "5",
         "--d", "3", "--obs-dim", "12", "--q", "2",
         "--out", str(spec_path),
         "--buffer", str(buf_path), "--episodes", "2", "--steps", "15"],
        capsys)
    assert code == 0
    data = np.load(spec_path, allow_pickle=False)
    assert data["w_obs"].shape == (3, 12)
    assert data["mask_s_s"].shape == (3, 3)
    buf = ReplayBuffer.load(str(buf_path))
    assert buf.n_episodes == 2
    assert buf.obs_dim == 12
    assert "mask densities" in out


def test_gen_env_linear(tmp_path, capsys):
    path = tmp_path / "lin.npz"
    code, out, _ = run_cli(
        ["gen-env", "--family", "linear", "--seed", "1", "--d", "5",
         "--q", "1", "--out", str(path)], capsys)
    assert code == 0
    data = np.load(path)
    assert data["A"].shape == (5, 5)
    assert data["C"].shape == (5, 1)


# ============================================================
# identcheck
# ============================================================

def test_identcheck_clean_regime_exits_zero(capsys):
    code, out, _ = run_cli(
        ["identcheck", "--trials", "3", "--tasks", "8", "--steps", "300",
         "--sigma", "0.1", "--prop1-instances", "5", "--seed", "2"],
        capsys)
    assert code == 0
    assert "3/3 trials passed" in out
    assert "min singular value" in out


def test_identcheck_impossible_threshold_exits_one(capsys):
    code, out, _ = run_cli(
        ["identcheck", "--trials", "2", "--tasks", "6", "--steps", "200",
         "--max-a-err", "0", "--prop1-instances", "2"], capsys)
    assert code == 1
    assert "NO" in out


# ============================================================
# train / eval / adapt / run-sequence on a tiny synthetic setup
# ============================================================

def _tiny_ini(tmp_path, **run_overrides):
    from test_harness import tiny_cfg
    cfg = tiny_cfg(str(tmp_path / "results"), **run_overrides)
    path = tmp_path / "tiny.ini"
    path.write_text(harness.dump_config(cfg))
    return path


def test_train_eval_adapt_cycle(tmp_path, capsys):
    ini = _tiny_ini(tmp_path)
    code, out, _ = run_cli(
        ["train", "--config", str(ini), "--seed", "0"], capsys)
    assert code == 0
    assert "tau_star" in out
    ckpt = str(tmp_path / "results" / "seed0" / "task1")
    assert os.path.exists(ckpt + ".meta.json")

    code, out, _ = run_cli(
        ["eval", "--config", str(ini), "--model", ckpt, "--task", "1",
         "--seed", "0", "--episodes", "1"], capsys)
    assert code == 0
    assert "mean score" in out

    # collect a buffer from the same task and adapt against a loose tau
    buf_path = tmp_path / "t1.buffer"
    run_cli(["gen-env", "--family", "synthetic", "--seed", "0",
             "--d", "2", "--obs-dim", "10", "--q", "2",
             "--out", str(tmp_path / "unused.npz"),
             "--buffer", str(buf_path), "--episodes", "3", "--steps", "30"],
            capsys)
    code, out, _ = run_cli(
        ["adapt", "--model", ckpt, "--buffer", str(buf_path),
         "--tau", "100.0", "--strategy", "rnd",
         "--out", str(tmp_path / "adapted" / "m")], capsys)
    assert code == 0
    assert '"verdict"' in out
    assert os.path.exists(str(tmp_path / "adapted" / "m") + ".meta.json")


def test_eval_bad_task_index(tmp_path, capsys):
    ini = _tiny_ini(tmp_path)
    run_cli(["train", "--config", str(ini), "--seed", "0"], capsys)
    ckpt = str(tmp_path / "results" / "seed0" / "task1")
    with pytest.raises(SystemExit):
        cli.main(["eval", "--config", str(ini), "--model", ckpt,
                  "--task", "9"])


def test_run_sequence_and_set_overrides(tmp_path, capsys):
    ini = _tiny_ini(tmp_path)
    out_dir = tmp_path / "seq"
    code, out, _ = run_cli(
        ["run-sequence", "--config", str(ini), "--seeds", "0",
         "--out", str(out_dir), "--set", "run.eval_episodes=1"], capsys)
    assert code == 0
    assert (out_dir / "metrics.csv").exists()
    assert (out_dir / "summary.md").exists()
    assert "metrics" in out


def test_run_sequence_ablation_flag(tmp_path, capsys):
    ini = _tiny_ini(tmp_path)
    code, out, _ = run_cli(
        ["run-sequence", "--config", str(ini), "--seeds", "0",
         "--out", str(tmp_path / "ab"), "--ablation", "no-theta"], capsys)
    assert code == 0


def test_set_rejects_unknown_key(tmp_path, capsys):
    ini = _tiny_ini(tmp_path)
    with pytest.raises(SystemExit):
        cli.main(["run-sequence", "--config", str(ini),
                  "--set", "run.nonsense=1"])
