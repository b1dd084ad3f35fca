"""Command-line entry point orchestrating experiments from a config file."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys

import numpy as np

from . import datasets, metrics
from .config import ConfigError, load_config
from .coupling import couple
from .datasets import DatasetSpec, sample
from .error_bounds import BoundViolation, standard_suite
from .fields import load_checkpoint, save_checkpoint
from .finetune import FlowStack, dominance_penalty, finetune, finetune_residual, \
    residual_square_matrices
from .rng import Rng
from .solvers import SolverConfig, integrate, integrate_batch
from .stability import (StabilityCertificate, contraction_probe, search_certificate,
                        structure_check, verify_contraction, verify_iss)
from .training import pretrain


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


def _write_manifest(out_dir: str, subcommand: str, cfg, seed: int,
                    checkpoint: str | None, metrics_dict: dict) -> None:
    manifest = {
        "subcommand": subcommand,
        "config": cfg.snapshot(),
        "seed": seed,
        "checkpoint_hash": _sha256(checkpoint) if checkpoint else None,
        "metrics": metrics_dict,
    }
    with open(os.path.join(out_dir, f"manifest_{subcommand}.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)


def _load_stack(args, cfg):
    field, _ = load_checkpoint(args.checkpoint)
    if getattr(args, "residual_checkpoint", None):
        residual, _ = load_checkpoint(args.residual_checkpoint)
        horizon = float(cfg.get("finetune", "horizon_t"))
        return FlowStack(field, residual, horizon)
    return FlowStack(field)


def _eval_metrics(stack: FlowStack, cfg, seed: int) -> dict:
    spec = cfg.dataset_spec()
    n = min(spec.sample_count, metrics.MAX_W2_SAMPLES)
    rng = Rng(seed).split(41)
    x0 = sample(DatasetSpec("gaussian", 1.0, n), rng.split(1))
    x1 = sample(DatasetSpec(spec.name, spec.noise_scale, n), rng.split(2))
    solver = cfg.solver_config()
    generated, nfe = stack.reconstruct_np(x0, solver)
    batch = couple(x0, x1, "minibatch_ot")
    recon, _ = metrics.reconstruction_mse(batch, stack, solver)
    record_cfg = cfg.solver_config(record=True)
    straight = []
    for i in range(min(16, n)):
        traj = integrate(stack.base, x0[i], 0.0, 1.0, record_cfg)
        if len(traj.times) >= 3:
            straight.append(metrics.straightness_deviation(traj))
    return {
        "w2": metrics.wasserstein2(generated, x1),
        "recon_mse": recon,
        "mean_nfe": nfe,
        "straightness_mean": float(np.mean(straight)) if straight else 0.0,
    }


def cmd_pretrain(args, cfg) -> int:
    out = cfg.output_dir()
    os.makedirs(out, exist_ok=True)
    train_cfg = cfg.train_config()
    field = cfg.make_field(dim=2, seed=train_cfg.seed)
    result = pretrain(field, cfg.dataset_spec(), train_cfg, out_dir=out)
    final_loss = result.history[-1][1] if result.history else float("nan")
    _write_manifest(out, "pretrain", cfg, train_cfg.seed,
                    result.final_checkpoint, {"final_loss": final_loss})
    print(f"pretrained checkpoint: {result.final_checkpoint}")
    return 0


def _held_out_batch(cfg, seed: int, n: int = 256):
    spec = cfg.dataset_spec()
    rng = Rng(seed).split(77)
    x0 = sample(DatasetSpec("gaussian", 1.0, n), rng.split(1))
    x1 = sample(DatasetSpec(spec.name, spec.noise_scale, n), rng.split(2))
    return couple(x0, x1, "minibatch_ot")


def cmd_finetune(args, cfg) -> int:
    out = cfg.output_dir()
    os.makedirs(out, exist_ok=True)
    mle_cfg = cfg.mle_config()
    field, _ = load_checkpoint(args.checkpoint)
    held = _held_out_batch(cfg, mle_cfg.seed)
    before, _ = metrics.reconstruction_mse(held, FlowStack(field), mle_cfg.solver)
    result = finetune(field, cfg.dataset_spec(), mle_cfg, out_dir=out)
    after, _ = metrics.reconstruction_mse(held, FlowStack(field), mle_cfg.solver)
    report = {"recon_mse_before": before, "recon_mse_after": after}
    with open(os.path.join(out, "finetune_metrics.json"), "w") as fh:
        json.dump(report, fh, indent=1)
    _write_manifest(out, "finetune", cfg, mle_cfg.seed,
                    result.final_checkpoint, report)
    print(f"fine-tuned checkpoint: {result.final_checkpoint} "
          f"(recon {before:.6g} -> {after:.6g})")
    return 0


def cmd_finetune_residual(args, cfg) -> int:
    out = cfg.output_dir()
    os.makedirs(out, exist_ok=True)
    mle_cfg = cfg.mle_config()
    if mle_cfg.horizon <= 0:
        raise ConfigError("finetune.horizon_t must be positive for residual mode")
    base, _ = load_checkpoint(args.checkpoint)
    if cfg.freeze_pretrained():
        base.params.freeze()
    residual = cfg.make_residual_field(dim=2, seed=mle_cfg.seed)
    held = _held_out_batch(cfg, mle_cfg.seed)
    before, _ = metrics.reconstruction_mse(held, FlowStack(base), mle_cfg.solver)
    result = finetune_residual(base, residual, cfg.dataset_spec(), mle_cfg,
                               out_dir=out)
    stack = FlowStack(base, residual, mle_cfg.horizon)
    after, _ = metrics.reconstruction_mse(held, stack, mle_cfg.solver)
    omega = dominance_penalty(
        [m.data for m in residual_square_matrices(residual)], mle_cfg.eps_a)
    report = {"recon_mse_before": before, "recon_mse_after": after,
              "dominance_score": omega,
              "dominance_penalty": mle_cfg.lambda_omega * max(omega, 0.0)}
    with open(os.path.join(out, "residual_metrics.json"), "w") as fh:
        json.dump(report, fh, indent=1)
    _write_manifest(out, "finetune-residual", cfg, mle_cfg.seed,
                    result.final_checkpoint, report)
    print(f"residual checkpoint: {result.final_checkpoint} "
          f"(recon {before:.6g} -> {after:.6g}, omega {omega:.4g})")
    return 0


def cmd_sample(args, cfg) -> int:
    out = cfg.output_dir()
    os.makedirs(out, exist_ok=True)
    stack = _load_stack(args, cfg)
    spec = cfg.dataset_spec()
    seed = int(cfg.get("train", "seed"))
    x0 = sample(DatasetSpec("gaussian", 1.0, spec.sample_count),
                Rng(seed).split(5))
    finals, nfe = stack.reconstruct_np(x0, cfg.solver_config())
    path = os.path.join(out, "samples.csv")
    datasets.write_csv(path, finals)
    _write_manifest(out, "sample", cfg, seed, args.checkpoint,
                    {"mean_nfe": nfe, "samples": path})
    print(f"wrote {spec.sample_count} samples to {path} (mean NFE {nfe:.1f})")
    return 0


def cmd_eval(args, cfg) -> int:
    out = cfg.output_dir()
    os.makedirs(out, exist_ok=True)
    stack = _load_stack(args, cfg)
    seed = int(cfg.get("train", "seed"))
    report = _eval_metrics(stack, cfg, seed)
    path = os.path.join(out, "eval.json")
    with open(path, "w") as fh:
        json.dump(report, fh, indent=1)
    _write_manifest(out, "eval", cfg, seed, args.checkpoint, report)
    print(json.dumps(report, indent=1))
    return 0


def cmd_analyze_stability(args, cfg) -> int:
    out = cfg.output_dir()
    os.makedirs(out, exist_ok=True)
    field, _ = load_checkpoint(args.checkpoint)
    if field.kind != "controlsynth":
        raise ConfigError("stability analysis applies to residual checkpoints")
    tol = float(cfg.get("stability", "tol"))
    if args.certificate:
        cert = StabilityCertificate.from_json(args.certificate)
    else:
        cert, _ = search_certificate(field,
                                     attempts=int(cfg.get("stability", "attempts")),
                                     seed=int(cfg.get("train", "seed")), tol=tol)
        cert.to_json(os.path.join(out, "certificate.json"))
    problems = structure_check(field, cert, tol)
    iss = verify_iss(field, cert, tol) if not problems else None
    con = verify_contraction(field, cert, tol) if not problems else None
    verdict = {
        "structure_problems": problems,
        "iss_ok": bool(iss.iss_ok) if iss else False,
        "contraction_ok": bool(con.contraction_ok) if con else False,
        "lambda_max_Q": iss.lambda_max_q if iss else None,
        "lambda_max_Qtilde": con.lambda_max_qtilde if con else None,
        "violated": (iss.violated if iss else []) + (con.violated if con else []),
    }
    with open(os.path.join(out, "stability_verdict.json"), "w") as fh:
        json.dump(verdict, fh, indent=1)
    # probe curves for a few random disturbances around the origin
    probe_n = int(cfg.get("stability", "probe_count"))
    horizon = float(cfg.get("stability", "probe_horizon"))
    scale = float(cfg.get("stability", "probe_scale"))
    rng = Rng(int(cfg.get("train", "seed"))).split(21)
    solver = SolverConfig(method="dopri5", rtol=1e-8, atol=1e-8)
    ratios = []
    with open(os.path.join(out, "probe_curves.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["probe", "t", "xi_norm"])
        for i in range(min(probe_n, 100)):
            x0 = scale * rng.normal(field.dim)
            d0 = scale * rng.normal(field.dim)
            bound = field.bound(np.zeros(field.cond_dim))
            probe = contraction_probe(bound, x0, d0, horizon, solver)
            ratios.append(probe.ratio)
            for t, v in zip(probe.times, probe.xi_norms):
                writer.writerow([i, repr(float(t)), repr(float(v))])
    verdict["probe_ratio_max"] = max(ratios) if ratios else None
    with open(os.path.join(out, "stability_verdict.json"), "w") as fh:
        json.dump(verdict, fh, indent=1)
    _write_manifest(out, "analyze-stability", cfg,
                    int(cfg.get("train", "seed")), args.checkpoint, verdict)
    print(json.dumps(verdict, indent=1))
    return 0 if verdict["iss_ok"] and verdict["contraction_ok"] else 1


def cmd_verify_bounds(args, cfg) -> int:
    out = cfg.output_dir()
    os.makedirs(out, exist_ok=True)
    try:
        reports = standard_suite()
        failed = 0
    except BoundViolation as exc:
        reports = [exc.report]
        failed = 1
    path = os.path.join(out, "bound_report.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case", "L_u", "delta", "M", "eps0", "bound4",
                         "bound5", "measured", "pass"])
        for r in reports:
            writer.writerow([r.case, r.l_u, r.delta, r.m_bound, r.eps0,
                             r.bound_variable,
                             "" if r.bound_uniform is None else r.bound_uniform,
                             r.measured, r.passed])
    n_pass = sum(r.passed for r in reports)
    _write_manifest(out, "verify-bounds", cfg, 0, None,
                    {"cases": len(reports), "passed": n_pass})
    print(f"bound validation: {n_pass}/{len(reports)} cases pass ({path})")
    return 0 if not failed and n_pass == len(reports) else 1


def cmd_probe_contraction(args, cfg) -> int:
    out = cfg.output_dir()
    os.makedirs(out, exist_ok=True)
    field, _ = load_checkpoint(args.checkpoint)
    x0 = np.array([float(v) for v in args.x0.split(",")])
    d0 = np.array([float(v) for v in args.d0.split(",")])
    horizon = float(cfg.get("stability", "probe_horizon"))
    solver = SolverConfig(method="dopri5", rtol=1e-8, atol=1e-8)
    if field.kind == "controlsynth":
        field = field.bound(np.zeros(field.cond_dim))
    probe = contraction_probe(field, x0, d0, horizon, solver)
    curve = os.path.join(out, "probe_curve.csv")
    probe.to_csv(curve)
    report = {"ratio": probe.ratio, "horizon": horizon, "curve": curve}
    with open(os.path.join(out, "probe.json"), "w") as fh:
        json.dump(report, fh, indent=1)
    _write_manifest(out, "probe-contraction", cfg,
                    int(cfg.get("train", "seed")), args.checkpoint, report)
    print(json.dumps(report))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowtune",
        description="Train, fine-tune and analyze flow-matching models on "
                    "synthetic 2-D densities.")
    parser.add_argument("--config", "-c", help="path to an INI config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE",
                        help="override a config entry (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("pretrain", help="train a velocity field from scratch")

    p_ft = sub.add_parser("finetune", help="MLE fine-tuning of a checkpoint")
    p_ft.add_argument("--checkpoint", required=True)
    _add_finetune_flags(p_ft)

    p_res = sub.add_parser("finetune-residual",
                           help="train a frozen-base residual stage")
    p_res.add_argument("--checkpoint", required=True)
    _add_finetune_flags(p_res)

    p_sample = sub.add_parser("sample", help="generate samples from a checkpoint")
    p_sample.add_argument("--checkpoint", required=True)
    p_sample.add_argument("--residual-checkpoint")

    p_eval = sub.add_parser("eval", help="W2 / reconstruction / NFE metrics")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--residual-checkpoint")

    p_st = sub.add_parser("analyze-stability",
                          help="verify LMI certificates and probe contraction")
    p_st.add_argument("--checkpoint", required=True)
    p_st.add_argument("--certificate", help="certificate JSON (searched if omitted)")

    sub.add_parser("verify-bounds", help="run the analytic error-bound suite")

    p_probe = sub.add_parser("probe-contraction",
                             help="decay curve of a perturbed trajectory")
    p_probe.add_argument("--checkpoint", required=True)
    p_probe.add_argument("--x0", default="0,0")
    p_probe.add_argument("--d0", default="0.1,0")
    return parser


def _add_finetune_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--horizon-T", dest="horizon_t", type=float,
                   help="residual window length T")
    p.add_argument("--lambda-omega", dest="lambda_omega", type=float,
                   help="dominance penalty weight")
    p.add_argument("--sigma", help="scalar or comma-separated diagonal variance")
    p.add_argument("--freeze-pretrained", dest="freeze_pretrained",
                   choices=("true", "false"),
                   help="keep the pretrained field fixed in residual mode")


_COMMANDS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "finetune-residual": cmd_finetune_residual,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "analyze-stability": cmd_analyze_stability,
    "verify-bounds": cmd_verify_bounds,
    "probe-contraction": cmd_probe_contraction,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides = list(args.overrides)
    for flag, target in (("horizon_t", "finetune.horizon_t"),
                         ("lambda_omega", "finetune.lambda_omega"),
                         ("sigma", "finetune.sigma"),
                         ("freeze_pretrained", "finetune.freeze_pretrained")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{target}={value}")
    try:
        cfg = load_config(args.config, overrides)
        return _COMMANDS[args.command](args, cfg)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except BoundViolation as exc:
        print(f"bound violation: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
