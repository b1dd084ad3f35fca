"""Simulation-free pretraining on the straight conditional path."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field as dc_field, replace

import numpy as np

from .autodiff import NonFiniteLoss, ParamStore, Tensor, no_grad
from .coupling import couple
from .datasets import DatasetSpec, sample
from .fields import save_checkpoint
from .rng import Rng


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    steps: int = 2000
    learning_rate: float = 1e-4
    grad_clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    coupling: str = "minibatch_ot"
    seed: int = 0
    checkpoint_interval: int = 500

    def __post_init__(self):
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size >= 1 and steps >= 0 required")
        if self.learning_rate < 0 or self.grad_clip <= 0:
            raise ValueError("learning_rate >= 0 and grad_clip > 0 required")


class Adam:
    """Adam update over the trainable entries of a ParamStore."""

    def __init__(self, params: ParamStore, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.trainable()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.trainable()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.trainable():
            g = p.grad
            if g is None:
                continue
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mhat = self.m[name] / (1 - b1 ** self.t)
            vhat = self.v[name] / (1 - b2 ** self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def cfm_loss(field, batch, t_batch: np.ndarray | None = None,
             rng: Rng | None = None) -> Tensor:
    """Conditional velocity regression on the straight path.

    Loss = mean_i || v(t_i, (1-t_i) x0_i + t_i x1_i) - (x1_i - x0_i) ||^2
    with per-sample t uniform on [0, 1] when not supplied.
    """
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    if t_batch is None:
        if rng is None:
            raise ValueError("need either t_batch or an rng to draw it")
        t_batch = rng.uniform(0.0, 1.0, n)
    t_batch = np.asarray(t_batch, dtype=np.float64)
    xt = (1.0 - t_batch)[:, None] * batch.x0 + t_batch[:, None] * batch.x1
    target = batch.x1 - batch.x0
    v = field.forward(t_batch, Tensor(xt))
    resid = v - Tensor(target)
    return resid.square().sum(axis=1).mean()


@dataclass
class TrainResult:
    history: list = dc_field(default_factory=list)  # (step, loss, grad_norm)
    checkpoints: list = dc_field(default_factory=list)
    final_checkpoint: str | None = None
    diverged: bool = False

    def losses(self) -> np.ndarray:
        return np.array([h[1] for h in self.history])

    def write_loss_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss", "grad_norm"])
            for step, loss, gnorm in self.history:
                writer.writerow([step, repr(loss), repr(gnorm)])


def pretrain(field, target_spec: DatasetSpec, cfg: TrainConfig,
             out_dir: str | None = None,
             source_spec: DatasetSpec | None = None) -> TrainResult:
    """Train a velocity field by CFM; checkpoints land in `out_dir` if given.

    The source marginal defaults to the standard Gaussian.  Divergence (a
    non-finite loss) aborts and restores the last checkpointed parameters.
    """
    if source_spec is None:
        source_spec = DatasetSpec("gaussian", 1.0, cfg.batch_size)
    rng_data = Rng(cfg.seed).split(1)
    rng_t = Rng(cfg.seed).split(2)
    opt = Adam(field.params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    result = TrainResult()
    last_good = field.params.copy_values()

    def checkpoint(step: int, stage: str) -> None:
        nonlocal last_good
        last_good = field.params.copy_values()
        if out_dir is not None:
            path = os.path.join(out_dir, f"checkpoint_{stage}_{step:06d}.json")
            save_checkpoint(field, path, cfg.seed, step, stage)
            result.checkpoints.append(path)
            result.final_checkpoint = path

    for step in range(1, cfg.steps + 1):
        x0 = sample(replace(source_spec, sample_count=cfg.batch_size),
                    rng_data.split(step))
        x1 = sample(replace(target_spec, sample_count=cfg.batch_size),
                    rng_data.split(step + cfg.steps))
        batch = couple(x0, x1, cfg.coupling)
        field.params.zero_grad()
        loss = cfm_loss(field, batch, rng=rng_t.split(step))
        if not np.isfinite(loss.data):
            field.params.load_values(last_good)
            result.diverged = True
            break
        loss.backward()
        gnorm = field.params.clip_grads(cfg.grad_clip)
        opt.step()
        result.history.append((step, float(loss.data), gnorm))
        if cfg.checkpoint_interval and step % cfg.checkpoint_interval == 0:
            checkpoint(step, "train")

    if not result.diverged:
        checkpoint(cfg.steps, "pretrained")
    if out_dir is not None:
        result.write_loss_csv(os.path.join(out_dir, "loss_curve.csv"))
    if result.diverged:
        err = NonFiniteLoss("training diverged; parameters restored to the last "
                            "good checkpoint")
        err.result = result
        raise err
    return result


def smoothed(losses: np.ndarray, window: int = 20) -> np.ndarray:
    """Trailing moving average used for monotone-ish progress checks."""
    losses = np.asarray(losses, dtype=np.float64)
    out = np.empty_like(losses)
    for i in range(len(losses)):
        lo = max(0, i - window + 1)
        out[i] = losses[lo:i + 1].mean()
    return out
