"""End-to-end command-line runs on tiny budgets."""

import json
import os

import numpy as np
import pytest

from flowtune.cli import main
from flowtune.config import ConfigError, load_config

TINY = [
    "--set", "train.steps=40", "--set", "train.batch_size=16",
    "--set", "train.checkpoint_interval=20",
    "--set", "finetune.steps=10", "--set", "finetune.batch_size=8",
    "--set", "dataset.sample_count=24",
    "--set", "solver.method=euler", "--set", "solver.step_count=8",
]


def run_cli(*args):
    return main(list(args))


def outdir(tmp_path, name):
    return ["--set", f"output.dir={tmp_path / name}"]


def test_unknown_keys_fail_fast(tmp_path):
    cfg_file = tmp_path / "bad.ini"
    cfg_file.write_text("[train]\nbatch_size = 4\nlearning_rat = 1\n"
                        "[nonsense]\nfoo = 1\n")
    with pytest.raises(ConfigError) as exc:
        load_config(str(cfg_file))
    msg = str(exc.value)
    assert "train.learning_rat" in msg and "nonsense" in msg


def test_config_file_plus_overrides(tmp_path):
    cfg_file = tmp_path / "ok.ini"
    cfg_file.write_text("[dataset]\nname = spiral\n[train]\nsteps = 7\n")
    cfg = load_config(str(cfg_file), ["train.seed=9"])
    assert cfg.dataset_spec().name == "spiral"
    assert cfg.train_config().steps == 7
    assert cfg.train_config().seed == 9


def test_missing_config_file_errors():
    assert run_cli("--config", "/nonexistent/path.ini", "pretrain") == 2


def test_pretrain_then_sample_deterministic(tmp_path):
    assert run_cli(*TINY, *outdir(tmp_path, "t"), "pretrain") == 0
    ckpt = str(tmp_path / "t" / "checkpoint_pretrained_000040.json")
    assert os.path.exists(ckpt)
    csvs = []
    for run in ("s1", "s2"):
        assert run_cli(*TINY, *outdir(tmp_path, run), "sample",
                       "--checkpoint", ckpt) == 0
        csvs.append((tmp_path / run / "samples.csv").read_bytes())
    assert csvs[0] == csvs[1]
    manifest = json.loads((tmp_path / "s1" / "manifest_sample.json").read_text())
    assert manifest["subcommand"] == "sample"
    assert manifest["checkpoint_hash"]
    assert manifest["config"]["train"]["steps"] == "40"


def test_finetune_zero_lr_checkpoint_hash_stable(tmp_path):
    assert run_cli(*TINY, *outdir(tmp_path, "base"), "pretrain") == 0
    ckpt = str(tmp_path / "base" / "checkpoint_pretrained_000040.json")
    assert run_cli(*TINY, *outdir(tmp_path, "ft"),
                   "--set", "finetune.learning_rate=0",
                   "--set", "finetune.checkpoint_interval=0",
                   "finetune", "--checkpoint", ckpt) == 0
    out_ckpt = tmp_path / "ft" / "checkpoint_finetune_final_000010.json"
    ref = json.loads(open(ckpt).read())["params"]
    got = json.loads(out_ckpt.read_text())["params"]
    assert ref == got
    report = json.loads((tmp_path / "ft" / "finetune_metrics.json").read_text())
    assert report["recon_mse_before"] == pytest.approx(report["recon_mse_after"])


def test_finetune_residual_cli_flags(tmp_path):
    assert run_cli(*TINY, *outdir(tmp_path, "base"), "pretrain") == 0
    ckpt = str(tmp_path / "base" / "checkpoint_pretrained_000040.json")
    assert run_cli(*TINY, *outdir(tmp_path, "res"),
                   "finetune-residual", "--checkpoint", ckpt,
                   "--horizon-T", "0.5", "--lambda-omega", "0.05",
                   "--sigma", "1.0", "--freeze-pretrained", "true") == 0
    report = json.loads((tmp_path / "res" / "residual_metrics.json").read_text())
    assert "dominance_score" in report
    ckpts = [p for p in os.listdir(tmp_path / "res") if p.startswith("checkpoint")]
    assert any("residual" in c for c in ckpts)


def test_eval_emits_metric_json(tmp_path):
    assert run_cli(*TINY, *outdir(tmp_path, "base"), "pretrain") == 0
    ckpt = str(tmp_path / "base" / "checkpoint_pretrained_000040.json")
    assert run_cli(*TINY, *outdir(tmp_path, "ev"), "eval",
                   "--checkpoint", ckpt) == 0
    report = json.loads((tmp_path / "ev" / "eval.json").read_text())
    assert set(report) == {"w2", "recon_mse", "mean_nfe", "straightness_mean"}
    assert report["mean_nfe"] == 8.0  # euler, 8 fixed steps


def test_verify_bounds_cli(tmp_path):
    assert run_cli(*outdir(tmp_path, "vb"), "verify-bounds") == 0
    lines = (tmp_path / "vb" / "bound_report.csv").read_text().strip().splitlines()
    assert lines[0].startswith("case,L_u,delta,M,eps0,bound4,bound5,measured,pass")
    assert len(lines) >= 13
    assert all(line.endswith("True") for line in lines[1:])


def test_probe_contraction_cli(tmp_path):
    assert run_cli(*TINY, *outdir(tmp_path, "base"), "pretrain") == 0
    ckpt = str(tmp_path / "base" / "checkpoint_pretrained_000040.json")
    assert run_cli(*TINY, *outdir(tmp_path, "pc"), "probe-contraction",
                   "--checkpoint", ckpt, "--x0", "0,0", "--d0", "0.1,0") == 0
    report = json.loads((tmp_path / "pc" / "probe.json").read_text())
    assert report["ratio"] > 0
    assert os.path.exists(tmp_path / "pc" / "probe_curve.csv")


def test_analyze_stability_cli(tmp_path):
    # train a tiny residual checkpoint first, then analyze it
    assert run_cli(*TINY, *outdir(tmp_path, "base"), "pretrain") == 0
    ckpt = str(tmp_path / "base" / "checkpoint_pretrained_000040.json")
    assert run_cli(*TINY, *outdir(tmp_path, "res"),
                   "--set", "field.block_dims=2",
                   "finetune-residual", "--checkpoint", ckpt,
                   "--horizon-T", "0.5", "--lambda-omega", "0.05") == 0
    res_ckpt = str(tmp_path / "res" / "checkpoint_residual_final_000010.json")
    code = run_cli(*TINY, *outdir(tmp_path, "st"),
                   "--set", "stability.probe_count=5",
                   "--set", "field.block_dims=2",
                   "analyze-stability", "--checkpoint", res_ckpt)
    verdict = json.loads((tmp_path / "st" / "stability_verdict.json").read_text())
    assert "iss_ok" in verdict and "lambda_max_Q" in verdict
    assert os.path.exists(tmp_path / "st" / "probe_curves.csv")
    assert code in (0, 1)  # soundness of the verdict matters, not feasibility


def test_output_root_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv("FLOWTUNE_OUTPUT_ROOT", str(tmp_path))
    assert run_cli(*TINY, "--set", "output.dir=envrun", "pretrain") == 0
    assert os.path.exists(tmp_path / "envrun" / "manifest_pretrain.json")
