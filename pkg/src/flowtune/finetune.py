"""Reconstruction fine-tuning of a pretrained flow.

Two mutually exclusive modes:

* straightforward: all pretrained parameters follow gradients of the
  reconstruction loss through the unrolled fixed-step solve on [0, 1];
* residual: the pretrained field is frozen, a structured residual field is
  integrated on [1, 1+T] from the handoff state (which also conditions its
  affine input map), and an optional dominance penalty pushes its square
  matrices toward negative diagonal dominance.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field as dc_field, replace

import numpy as np

from .autodiff import NonFiniteLoss, Tensor, no_grad
from .coupling import couple
from .datasets import DatasetSpec, sample
from .fields import ControlSynthField, save_checkpoint
from .rng import Rng
from .solvers import (FIXED_STEP_METHODS, SolverConfig, SolverConfigError,
                      integrate_batch, integrate_with_tape)
from .training import Adam, TrainResult


@dataclass(frozen=True)
class MleConfig:
    solver: SolverConfig = SolverConfig(method="euler", step_count=16)
    learning_rate: float = 5e-6
    residual_learning_rate: float = 1e-3
    sigma: float | tuple = 1.0
    horizon: float = 0.0
    lambda_omega: float = 0.0
    eps_a: float = 1e-6
    batch_size: int = 128
    steps: int = 200
    grad_clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    coupling: str = "minibatch_ot"
    repair_per_batch: bool = True
    seed: int = 0
    checkpoint_interval: int = 100

    def __post_init__(self):
        if np.any(np.asarray(self.sigma) <= 0):
            raise ValueError("sigma entries must be positive")
        if self.horizon < 0 or self.lambda_omega < 0 or self.eps_a <= 0:
            raise ValueError("need horizon >= 0, lambda_omega >= 0, eps_a > 0")
        if self.solver.method not in FIXED_STEP_METHODS:
            raise SolverConfigError("training requires a fixed-step solver")


class FlowStack:
    """A base flow on [0, 1] with an optional residual stage on [1, 1+T]."""

    def __init__(self, base, residual: ControlSynthField | None = None,
                 horizon: float = 0.0):
        if residual is not None and horizon <= 0:
            raise ValueError("a residual stage needs horizon > 0")
        self.base = base
        self.residual = residual
        self.horizon = float(horizon)

    def reconstruct_tensor(self, x0: np.ndarray, cfg: SolverConfig) -> Tensor:
        """Taped reconstruction; gradients flow into whichever stage trains."""
        if self.residual is None:
            _, x_t = integrate_with_tape(self.base, Tensor(np.atleast_2d(x0)),
                                         0.0, 1.0, cfg)
            return x_t
        with no_grad():
            handoff, _ = integrate_batch(self.base, x0, 0.0, 1.0, cfg)
        bound = self.residual.bound(handoff)
        _, x_t = integrate_with_tape(bound, Tensor(handoff), 1.0,
                                     1.0 + self.horizon, cfg)
        return x_t

    def reconstruct_np(self, x0: np.ndarray, cfg: SolverConfig) -> tuple[np.ndarray, float]:
        """Inference reconstruction (any solver); returns (finals, mean NFE)."""
        finals, nfe = integrate_batch(self.base, np.atleast_2d(x0), 0.0, 1.0, cfg)
        if self.residual is not None:
            bound = self.residual.bound(finals)
            finals, nfe2 = integrate_batch(bound, finals, 1.0, 1.0 + self.horizon, cfg)
            nfe += nfe2
        return finals, nfe


def _sigma_vector(sigma) -> np.ndarray | None:
    """None for the scalar-covariance loss, a positive vector for diagonal."""
    arr = np.asarray(sigma, dtype=np.float64)
    if arr.ndim == 0:
        return None
    if np.any(arr <= 0):
        raise ValueError("sigma entries must be positive")
    return arr


def mle_loss(stack, batch, cfg: SolverConfig, sigma=1.0) -> Tensor:
    """Reconstruction loss of paired samples through the taped solve.

    Scalar covariance: mean_i ||x1_i - xhat_i||^2.  Diagonal covariance
    sigma = (sigma^1..sigma^d): mean_i (1/2) sum_j eps_ij^2 / sigma^j.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    if not isinstance(stack, FlowStack):
        stack = FlowStack(stack)
    x_hat = stack.reconstruct_tensor(batch.x0, cfg)
    eps = Tensor(batch.x1) - x_hat
    sig = _sigma_vector(sigma)
    if sig is None:
        return eps.square().sum(axis=1).mean()
    return (eps.square() * Tensor(1.0 / sig)).sum(axis=1).mean() * 0.5


def dominance_score_tensor(mats: list[Tensor], eps_a: float) -> Tensor:
    """Signed Gershgorin row score, differentiable.

    Each row contributes (diag + sum of off-diagonal magnitudes) normalised
    by the row's absolute mass; non-positive total means every Gershgorin
    disc sits in the closed left half plane.
    """
    total = None
    for m in mats:
        d = m.data.shape[0]
        if m.data.ndim != 2 or m.data.shape[1] != d:
            raise ValueError(f"dominance score needs square matrices, got {m.data.shape}")
        mask = Tensor(np.eye(d))
        abs_m = m.abs()
        row_mass = abs_m.sum(axis=1)
        diag = (m * mask).sum(axis=1)
        abs_diag = (abs_m * mask).sum(axis=1)
        num = diag + (row_mass - abs_diag)
        score = (num / (row_mass + eps_a)).sum()
        total = score if total is None else total + score
    if total is None:
        raise ValueError("no matrices given")
    return total


def dominance_penalty(mats, eps_a: float = 1e-6) -> float:
    """The raw score omega for a list of square numpy matrices."""
    tensors = [m if isinstance(m, Tensor) else Tensor(np.asarray(m, dtype=np.float64))
               for m in mats]
    return float(dominance_score_tensor(tensors, eps_a).data)


def residual_square_matrices(field: ControlSynthField) -> list[Tensor]:
    """Square matrices the penalty acts on: A0 and each A_j W_j product."""
    mats = [field.params["A0"]]
    for j in range(1, field.n_blocks + 1):
        mats.append(field.params[f"A{j}"] @ field.params[f"W{j}"])
    return mats


def _finetune_loop(stack: FlowStack, train_params, target_spec: DatasetSpec,
                   cfg: MleConfig, out_dir: str | None, lr: float,
                   stage: str, penalised_field: ControlSynthField | None,
                   source_spec: DatasetSpec | None = None) -> TrainResult:
    if source_spec is None:
        source_spec = DatasetSpec("gaussian", 1.0, cfg.batch_size)
    rng_data = Rng(cfg.seed).split(11)
    opt = Adam(train_params, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    result = TrainResult()
    last_good = train_params.copy_values()
    fixed_pool = None
    if not cfg.repair_per_batch:
        # pairs are frozen once; later steps only re-subsample the paired pool
        pool_n = min(8 * cfg.batch_size, 512)
        x0 = sample(replace(source_spec, sample_count=pool_n),
                    rng_data.split(7001))
        x1 = sample(replace(target_spec, sample_count=pool_n),
                    rng_data.split(7002))
        fixed_pool = couple(x0, x1, cfg.coupling)

    def checkpoint(step: int, tag: str) -> None:
        nonlocal last_good
        last_good = train_params.copy_values()
        if out_dir is not None:
            target = stack.residual if stage == "residual" else stack.base
            path = os.path.join(out_dir, f"checkpoint_{tag}_{step:06d}.json")
            save_checkpoint(target, path, cfg.seed, step, tag)
            result.checkpoints.append(path)
            result.final_checkpoint = path

    for step in range(1, cfg.steps + 1):
        if cfg.repair_per_batch:
            x0 = sample(replace(source_spec, sample_count=cfg.batch_size),
                        rng_data.split(step))
            x1 = sample(replace(target_spec, sample_count=cfg.batch_size),
                        rng_data.split(step + cfg.steps))
            batch = couple(x0, x1, cfg.coupling)
        else:
            idx = rng_data.split(1000 + step).integers(0, len(fixed_pool),
                                                       cfg.batch_size)
            batch = type(fixed_pool)(fixed_pool.x0[idx], fixed_pool.x1[idx],
                                     fixed_pool.method, fixed_pool.cost)
        train_params.zero_grad()
        loss = mle_loss(stack, batch, cfg.solver, cfg.sigma)
        if penalised_field is not None and cfg.lambda_omega > 0:
            omega = dominance_score_tensor(
                residual_square_matrices(penalised_field), cfg.eps_a)
            loss = loss + omega.relu() * cfg.lambda_omega
        if not np.isfinite(loss.data):
            train_params.load_values(last_good)
            result.diverged = True
            break
        loss.backward()
        gnorm = train_params.clip_grads(cfg.grad_clip)
        opt.step()
        result.history.append((step, float(loss.data), gnorm))
        if cfg.checkpoint_interval and step % cfg.checkpoint_interval == 0:
            checkpoint(step, stage)

    if not result.diverged:
        checkpoint(cfg.steps, f"{stage}_final")
    if out_dir is not None:
        result.write_loss_csv(os.path.join(out_dir, f"loss_curve_{stage}.csv"))
    if result.diverged:
        err = NonFiniteLoss("fine-tuning diverged; parameters restored")
        err.result = result
        raise err
    return result


def finetune(field, target_spec: DatasetSpec, cfg: MleConfig,
             out_dir: str | None = None,
             source_spec: DatasetSpec | None = None) -> TrainResult:
    """Straightforward MLE fine-tuning: updates every pretrained parameter."""
    stack = FlowStack(field)
    return _finetune_loop(stack, field.params, target_spec, cfg, out_dir,
                          cfg.learning_rate, "finetune", None, source_spec)


def finetune_residual(base_field, residual: ControlSynthField,
                      target_spec: DatasetSpec, cfg: MleConfig,
                      out_dir: str | None = None,
                      source_spec: DatasetSpec | None = None) -> TrainResult:
    """Residual MLE fine-tuning on [1, 1+T]; the base field stays frozen.

    The handoff state is computed without the tape, so base gradient slots
    are never touched, and only residual parameters are stepped.
    """
    if cfg.horizon <= 0:
        raise ValueError("residual fine-tuning requires horizon > 0")
    stack = FlowStack(base_field, residual, cfg.horizon)
    return _finetune_loop(stack, residual.params, target_spec, cfg, out_dir,
                          cfg.residual_learning_rate, "residual", residual,
                          source_spec)
