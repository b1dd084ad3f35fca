"""Acceptance gate: one test per shipped criterion, tolerances pinned.

Run with `pytest tests/test_acceptance.py -v -s` to see one line per
criterion.  Budgets are generous on a laptop: the slowest criterion (the
two-moons fine-tuning study) stays well under its 15-minute cap.
"""

import itertools
import json
import os

import numpy as np
import pytest

from flowtune.autodiff import grad_check
from flowtune.cli import main as cli_main
from flowtune.coupling import couple
from flowtune.datasets import DatasetSpec, sample
from flowtune.error_bounds import standard_suite
from flowtune.fields import (ControlSynthField, LeakyRelu, MlpField, Tanh,
                             decay_field)
from flowtune.finetune import (FlowStack, MleConfig, dominance_penalty, finetune,
                               finetune_residual, mle_loss,
                               residual_square_matrices)
from flowtune.linalg import solve_assignment, sym_eig_max
from flowtune.metrics import reconstruction_mse, wasserstein2
from flowtune.rng import Rng
from flowtune.solvers import SolverConfig, integrate, integrate_batch
from flowtune.stability import (contraction_probe, default_certificate,
                                verify_contraction, verify_iss)
from flowtune.training import TrainConfig, cfm_loss, pretrain

EULER16 = SolverConfig(method="euler", step_count=16)


def report(criterion: str, ok: bool, detail: str = ""):
    print(f"[{'PASS' if ok else 'FAIL'}] {criterion}" + (f": {detail}" if detail else ""))
    assert ok, f"{criterion} failed: {detail}"


# -- criterion 1: gradient integrity over both loss families ---------------

def test_criterion_1_gradient_integrity():
    worst = 0.0
    for seed in range(10):
        rng = Rng(seed)
        field = MlpField(2, hidden=(4,), rng=rng.split(1))
        x0 = rng.normal((3, 2))
        x1 = rng.normal((3, 2))
        ts = rng.uniform(0.0, 1.0, 3)
        batch = couple(x0, x1, "independent")
        err_cfm = grad_check(lambda _: cfm_loss(field, batch, t_batch=ts),
                             field.params)
        solver = SolverConfig(method="euler", step_count=4)
        err_mle = grad_check(lambda _: mle_loss(FlowStack(field), batch,
                                                solver, 1.0), field.params)
        worst = max(worst, err_cfm, err_mle)
    report("criterion 1 (gradient integrity <= 1e-4, 10 seeds)",
           worst <= 1e-4, f"max relative error {worst:.3e}")


# -- criterion 2: solver orders and adaptive accuracy -----------------------

def test_criterion_2_solver_orders():
    def slope(method):
        errs, taus = [], []
        for n in (10, 20, 40, 80):
            cfg = SolverConfig(method=method, step_count=n)
            traj = integrate(decay_field(1), np.array([1.0]), 0.0, 1.0, cfg)
            errs.append(abs(traj.final_state[0] - np.exp(-1.0)))
            taus.append(1.0 / n)
        return float(np.polyfit(np.log(taus), np.log(errs), 1)[0])

    s_euler = slope("euler")
    s_rk4 = slope("rk4")
    cfg = SolverConfig(method="dopri5", rtol=1e-8, atol=1e-10)
    traj = integrate(decay_field(1), np.array([1.0]), 0.0, 1.0, cfg)
    adapt_err = abs(traj.final_state[0] - np.exp(-1.0))
    ok = abs(s_euler - 1.0) <= 0.1 and abs(s_rk4 - 4.0) <= 0.3 \
        and adapt_err <= 10 * cfg.rtol
    report("criterion 2 (orders: euler 1+-0.1, rk4 4+-0.3, dopri5 <= 10 rtol)",
           ok, f"euler {s_euler:.3f}, rk4 {s_rk4:.3f}, dopri5 err {adapt_err:.2e}")


# -- criterion 3: fine-tuning improves reconstruction on two moons ---------

def _held_out_batches(target: DatasetSpec, seed: int, bs: int = 128, k: int = 4):
    rng = Rng(seed).split(77)
    out = []
    for i in range(k):
        x0 = sample(DatasetSpec("gaussian", 1.0, bs), rng.split(2 * i + 1))
        x1 = sample(DatasetSpec(target.name, target.noise_scale, bs,
                                target.shift), rng.split(2 * i + 2))
        out.append(couple(x0, x1, "minibatch_ot"))
    return out


def _recon_mean(stack, batches):
    return float(np.mean([reconstruction_mse(b, stack, EULER16)[0]
                          for b in batches]))


def _w2_generated(stack, batches):
    x0 = np.concatenate([b.x0 for b in batches], axis=0)
    x1 = np.concatenate([b.x1 for b in batches], axis=0)
    generated, _ = stack.reconstruct_np(x0, EULER16)
    return wasserstein2(generated, x1)


@pytest.mark.slow
def test_criterion_3_finetune_improves_two_moons():
    target = DatasetSpec("two_moons", 1.0, 1)
    wins = 0
    details = []
    for seed in range(5):
        field = MlpField(2, rng=Rng(seed).split(99))
        pretrain(field, target, TrainConfig(steps=2000, seed=seed,
                                            checkpoint_interval=0))
        held = _held_out_batches(target, seed)
        stack = FlowStack(field)
        mse_before = _recon_mean(stack, held)
        w2_before = _w2_generated(stack, held)
        finetune(field, target, MleConfig(seed=seed, steps=200,
                                          checkpoint_interval=0))
        mse_after = _recon_mean(stack, held)
        w2_after = _w2_generated(stack, held)
        good = mse_after < mse_before and w2_after <= 1.1 * w2_before
        wins += good
        details.append(f"seed {seed}: mse {mse_before:.4f}->{mse_after:.4f} "
                       f"w2 {w2_before:.4f}->{w2_after:.4f} ({'ok' if good else 'X'})")
    report("criterion 3 (two-moons MLE fine-tune, >= 4/5 seeds)",
           wins >= 4, f"{wins}/5 | " + " | ".join(details))


# -- criterion 4: residual fine-tuning ---------------------------------------

@pytest.mark.slow
def test_criterion_4_residual_identity_and_training():
    # (a) zero residual is a bit-level identity
    rng = Rng(0)
    base = MlpField(2, rng=rng.split(99))
    zero_res = ControlSynthField.zeros(2)
    x0 = rng.normal((64, 2))
    plain, _ = FlowStack(base).reconstruct_np(x0, EULER16)
    stacked, _ = FlowStack(base, zero_res, 0.5).reconstruct_np(x0, EULER16)
    identity_ok = np.array_equal(plain, stacked)

    # (b) trained residual improves reconstruction with vanishing penalty
    target = DatasetSpec("gaussian", 1.0, 1, (2.0, 0.0))
    wins = 0
    details = []
    for seed in range(5):
        base = MlpField(2, rng=Rng(seed).split(99))
        pretrain(base, target, TrainConfig(steps=800, seed=seed,
                                           checkpoint_interval=0))
        held = _held_out_batches(target, seed)
        mse_before = _recon_mean(FlowStack(base), held)
        residual = ControlSynthField(2, rng=Rng(seed).split(98))
        cfg = MleConfig(seed=seed, steps=300, horizon=0.5, lambda_omega=0.05,
                        residual_learning_rate=5e-4, checkpoint_interval=0)
        finetune_residual(base, residual, target, cfg)
        mse_after = _recon_mean(FlowStack(base, residual, 0.5), held)
        omega = dominance_penalty(
            [m.data for m in residual_square_matrices(residual)], cfg.eps_a)
        penalty = cfg.lambda_omega * max(omega, 0.0)
        good = mse_after < mse_before and penalty <= 1e-3
        wins += good
        details.append(f"seed {seed}: mse {mse_before:.4f}->{mse_after:.4f} "
                       f"penalty {penalty:.1e} ({'ok' if good else 'X'})")
    report("criterion 4 (zero-residual identity + trained residual, >= 4/5)",
           identity_ok and wins >= 4,
           f"identity={identity_ok}, {wins}/5 | " + " | ".join(details))


# -- criterion 5: error bounds hold across the analytic suite ---------------

def test_criterion_5_error_bounds_hold():
    reports = standard_suite()
    n_uniform = sum(r.bound_uniform is not None for r in reports)
    ok = len(reports) >= 12 and all(r.passed for r in reports) and n_uniform > 0
    deltas = sorted({r.delta for r in reports})
    report("criterion 5 (measured <= bound on 100% of analytic suite)",
           ok, f"{sum(r.passed for r in reports)}/{len(reports)} cases, "
               f"deltas {deltas}, {n_uniform} uniform-grid cases")


# -- criterion 6: certificate soundness --------------------------------------

def test_criterion_6_certificate_soundness():
    scalar = ControlSynthField.zeros(1, block_dims=(), activations=(), slopes=())
    scalar.params["A0"].data[...] = np.array([[-1.0]])
    cert = default_certificate(scalar)
    cert.p_mat = np.array([[1.0]])
    cert.xi0 = np.zeros(1)
    cert.phi = np.array([[1.0]])
    q_ok = verify_iss(scalar, cert).iss_ok is True

    unstable = ControlSynthField.zeros(1, block_dims=(), activations=(), slopes=())
    unstable.params["A0"].data[...] = np.array([[1.0]])
    q_bad = verify_iss(unstable, cert).iss_ok is False

    # every field passing verify_contraction must contract on random probes
    certified = []
    f1 = ControlSynthField.zeros(2, block_dims=(), activations=(), slopes=())
    f1.params["A0"].data[...] = -np.eye(2)
    c1 = default_certificate(f1)
    c1.p_tilde = np.eye(2)
    c1.xi0_tilde = np.ones(2)
    certified.append((f1, c1))
    f2 = ControlSynthField.zeros(2, block_dims=(2,), activations=("tanh",),
                                 slopes=(None,))
    f2.params["A0"].data[...] = -2.0 * np.eye(2)
    f2.params["A1"].data[...] = -0.5 * np.eye(2)
    f2.params["W1"].data[...] = np.eye(2)
    c2 = default_certificate(f2)
    c2.p_mat = np.eye(2)
    c2.xi0 = np.ones(2)
    c2.lam = [np.ones(2)]
    c2.xi = [0.5 * np.ones(2)]
    c2.upsilon0 = [2.5 * np.ones(2)]
    c2.phi = 3.0 * np.eye(2)
    c2.p_tilde = np.eye(2)
    c2.xi0_tilde = np.ones(2)
    c2.lam_tilde = [0.5 * np.ones(2)]
    c2.gamma_mul = [1.5 * np.ones(2)]
    c2.omega_mul = [1.5 * np.ones(2)]
    certified.append((f2, c2))

    probe_cfg = SolverConfig(method="dopri5", rtol=1e-7, atol=1e-9)
    probes_ok = True
    rng = Rng(60)
    for field, cert_i in certified:
        assert verify_contraction(field, cert_i).contraction_ok is True
        bound = field.bound(np.zeros(field.cond_dim))
        for _ in range(100):
            x0 = rng.uniform(-2.0, 2.0, 2)
            d0 = rng.uniform(-0.5, 0.5, 2)
            while np.linalg.norm(d0) < 1e-6:
                d0 = rng.uniform(-0.5, 0.5, 2)
            probe = contraction_probe(bound, x0, d0, 1.0, probe_cfg, n_report=8)
            probes_ok = probes_ok and probe.ratio < 1.0
    report("criterion 6 (hand ISS examples + 100 contraction probes per "
           "certified field)", q_ok and q_bad and probes_ok,
           f"iss_true={q_ok}, iss_false={q_bad}, probes_contract={probes_ok}")


# -- criterion 7: increment inequality on 1e5 probes -------------------------

def test_criterion_7_increment_inequality_bulk():
    violations = 0
    for act in (Tanh(), LeakyRelu(0.1)):
        rng = Rng(7 if act.name == "tanh" else 8)
        n = 100_000
        k, d = 3, 2
        w = rng.normal((n, k, d))
        x = 3.0 * rng.normal((n, d))
        xi = 3.0 * rng.normal((n, d))
        pre0 = np.einsum("nkd,nd->nk", w, x)
        pre1 = np.einsum("nkd,nd->nk", w, x + xi)
        p = act(pre1) - act(pre0)
        lhs = np.sum(p * p, axis=1)
        wxi = np.einsum("nkd,nd->nk", w, xi)
        rhs = np.sum(wxi * act.lipschitz * p, axis=1)
        violations += int(np.sum(lhs > rhs + 1e-12 * (1.0 + np.abs(rhs))))
    report("criterion 7 (increment inequality, 1e5 probes x 2 activations)",
           violations == 0, f"{violations} violations")


# -- criterion 8: oracle equivalences ----------------------------------------

def brute_assignment_cost(cost):
    n = cost.shape[0]
    return min(sum(cost[i, p[i]] for i in range(n))
               for p in itertools.permutations(range(n)))


def test_criterion_8_oracle_equivalences():
    rng = Rng(88)
    mismatches = 0
    for _ in range(200):
        n = int(rng.integers(1, 7))
        cost = rng.uniform(0.0, 10.0, (n, n))
        perm = solve_assignment(cost)
        got = float(cost[np.arange(n), perm].sum())
        if abs(got - brute_assignment_cost(cost)) > 1e-6:
            mismatches += 1
    for _ in range(200):
        n = int(rng.integers(1, 5))
        a = rng.normal((n, n))
        m = a + a.T
        roots = np.roots(np.poly(m)).real
        if abs(sym_eig_max(m) - roots.max()) > 1e-6:
            mismatches += 1
    for _ in range(60):
        m = int(rng.integers(1, 7))
        a = rng.normal((m, 2))
        b = rng.normal((m, 2))
        brute = np.sqrt(min(np.mean([np.sum((a[i] - b[p[i]]) ** 2)
                                     for i in range(m)])
                            for p in itertools.permutations(range(m))))
        if abs(wasserstein2(a, b) - brute) > 1e-6:
            mismatches += 1
    report("criterion 8 (assignment/eigen/W2 oracle equivalence)",
           mismatches == 0, f"{mismatches} mismatches")


# -- criterion 9: determinism through the CLI --------------------------------

def test_criterion_9_cli_determinism(tmp_path):
    args = ["--set", "train.steps=60", "--set", "train.batch_size=32",
            "--set", "train.checkpoint_interval=30",
            "--set", "dataset.sample_count=64",
            "--set", "solver.method=euler", "--set", "solver.step_count=8"]
    blobs = []
    for run in ("r1", "r2"):
        out = tmp_path / run
        assert cli_main(args + ["--set", f"output.dir={out}", "pretrain"]) == 0
        ckpt = out / "checkpoint_pretrained_000060.json"
        assert cli_main(args + ["--set", f"output.dir={out}", "sample",
                                "--checkpoint", str(ckpt)]) == 0
        blobs.append((ckpt.read_bytes(), (out / "samples.csv").read_bytes()))
    ok = blobs[0] == blobs[1]
    report("criterion 9 (identical config+seed => identical artifacts)", ok)


# -- criterion 10: NFE accounting --------------------------------------------

def test_criterion_10_nfe_accounting():
    rng = Rng(10)
    x0 = rng.normal((16, 2))
    _, nfe_fixed = integrate_batch(decay_field(2), x0, 0.0, 1.0,
                                   SolverConfig(method="euler", step_count=100))
    fixed_ok = nfe_fixed == 100.0
    per_sample = []
    identity_ok = True
    for i in range(x0.shape[0]):
        traj = integrate(decay_field(2), x0[i], 0.0, 1.0,
                         SolverConfig(method="dopri5", rtol=1e-6, atol=1e-8))
        identity_ok &= traj.nfe == 6 * (traj.accepted_steps
                                        + traj.rejected_steps) + 1
        per_sample.append(traj.nfe)
    _, nfe_mean = integrate_batch(decay_field(2), x0, 0.0, 1.0,
                                  SolverConfig(method="dopri5", rtol=1e-6,
                                               atol=1e-8))
    mean_ok = nfe_mean == pytest.approx(float(np.mean(per_sample)))
    report("criterion 10 (NFE bookkeeping: fixed-step & adaptive identity)",
           fixed_ok and identity_ok and mean_ok,
           f"euler100={nfe_fixed}, adaptive mean={nfe_mean:.2f}")
