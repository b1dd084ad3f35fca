"""Forward ODE integration with trajectory and NFE accounting.

Fixed-step Euler/RK4 run either on plain arrays or through the autodiff
tape (training unrolls the discrete solve; there is no adjoint pass).  The
adaptive Dormand-Prince 5(4) integrator uses the standard embedded error
estimate with PI step-size control and FSAL reuse.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor

FIXED_STEP_METHODS = ("euler", "rk4")
METHODS = FIXED_STEP_METHODS + ("dopri5",)

# Dormand-Prince 5(4) tableau (7 stages, FSAL)
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_DP_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920,
                  -17253 / 339200, 22 / 525, -1 / 40])

_SAFETY = 0.9
_FACTOR_MIN = 0.2
_FACTOR_MAX = 5.0


class SolverConfigError(ValueError):
    pass


class StiffnessError(RuntimeError):
    """Adaptive step-size underflow; carries the failure location."""

    def __init__(self, t: float, h: float):
        super().__init__(f"step size underflow at t={t:.6g} (h={h:.3e}); "
                         "the field is too stiff for the configured h_min")
        self.t = t
        self.h = h


@dataclass(frozen=True)
class SolverConfig:
    method: str = "dopri5"
    step_count: int = 100
    rtol: float = 1e-6
    atol: float = 1e-8
    h_init: float = 1e-2
    h_min: float = 1e-9
    h_max: float = 10.0
    record_trajectory: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise SolverConfigError(f"unknown method {self.method!r}")
        if self.step_count < 1:
            raise SolverConfigError("step_count must be >= 1")
        if self.rtol <= 0 or self.atol <= 0:
            raise SolverConfigError("rtol and atol must be positive")
        if not (self.h_min <= self.h_init <= self.h_max):
            raise SolverConfigError("need h_min <= h_init <= h_max")


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    nfe: int
    accepted_steps: int
    rejected_steps: int = 0

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.states = np.asarray(self.states, dtype=np.float64)
        if len(self.times) != len(self.states):
            raise ValueError("times and states must have equal length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    def to_csv(self, path) -> None:
        if self.states.ndim != 2:
            raise ValueError("CSV export requires a single-sample trajectory")
        dim = self.states.shape[1]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t"] + [f"x{i + 1}" for i in range(dim)])
            for t, x in zip(self.times, self.states):
                writer.writerow([repr(float(t))] + [repr(float(v)) for v in x])

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({"times": self.times.tolist(),
                       "states": self.states.tolist(),
                       "nfe": self.nfe,
                       "accepted_steps": self.accepted_steps,
                       "rejected_steps": self.rejected_steps}, fh)


def _fixed_grid(t_a: float, t_b: float, n: int) -> np.ndarray:
    return np.linspace(t_a, t_b, n + 1)


def _euler_np(field, x: np.ndarray, grid: np.ndarray, record: list | None):
    nfe = 0
    for i in range(len(grid) - 1):
        tau = grid[i + 1] - grid[i]
        x = x + tau * field.velocity(grid[i], x)
        nfe += 1
        if record is not None:
            record.append(x.copy())
    return x, nfe


def _rk4_np(field, x: np.ndarray, grid: np.ndarray, record: list | None):
    nfe = 0
    for i in range(len(grid) - 1):
        t, tau = grid[i], grid[i + 1] - grid[i]
        k1 = field.velocity(t, x)
        k2 = field.velocity(t + tau / 2, x + tau / 2 * k1)
        k3 = field.velocity(t + tau / 2, x + tau / 2 * k2)
        k4 = field.velocity(t + tau, x + tau * k3)
        x = x + tau / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        nfe += 4
        if record is not None:
            record.append(x.copy())
    return x, nfe


def _dopri5_np(field, x: np.ndarray, t_a: float, t_b: float, cfg: SolverConfig,
               record: list[tuple[float, np.ndarray]] | None):
    t = t_a
    h = min(cfg.h_init, t_b - t_a)
    k = [None] * 7
    k[0] = field.velocity(t, x)
    nfe = 1
    accepted = rejected = 0
    err_prev = 1.0
    span = t_b - t_a
    while t < t_b - 1e-14 * max(1.0, abs(t_b)):
        h = min(h, t_b - t)
        for s in range(1, 7):
            xs = x + h * sum(_DP_A[s][m] * k[m] for m in range(s))
            k[s] = field.velocity(t + _DP_C[s] * h, xs)
        nfe += 6
        x_new = x + h * sum(_DP_B[m] * k[m] for m in range(7))
        err_vec = h * sum(_DP_E[m] * k[m] for m in range(7))
        scale = cfg.atol + cfg.rtol * np.maximum(np.abs(x), np.abs(x_new))
        err = float(np.sqrt(np.mean((err_vec / scale) ** 2)))
        if err <= 1.0:
            t = t + h
            x = x_new
            k[0] = k[6]  # FSAL
            accepted += 1
            if record is not None:
                record.append((t, np.array(x, copy=True)))
            factor = _FACTOR_MAX if err == 0.0 else \
                _SAFETY * err ** -0.14 * err_prev ** 0.08
            err_prev = max(err, 1e-10)
        else:
            rejected += 1
            factor = _SAFETY * err ** -0.2
        h = h * min(max(factor, _FACTOR_MIN), _FACTOR_MAX)
        if h < cfg.h_min and t < t_b - 1e-14 * max(1.0, abs(t_b)):
            raise StiffnessError(t, h)
        if h > span:
            h = span
    return x, nfe, accepted, rejected


def integrate(field, x0: np.ndarray, t_a: float, t_b: float,
              cfg: SolverConfig) -> Trajectory:
    """Solve dx/dt = v(t, x) forward from a single initial state."""
    if t_b <= t_a:
        raise ValueError("t_b must exceed t_a")
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    if not np.isfinite(x0).all():
        raise ValueError("non-finite initial state")
    if cfg.method in FIXED_STEP_METHODS:
        grid = _fixed_grid(t_a, t_b, cfg.step_count)
        record = [] if cfg.record_trajectory else None
        step = _euler_np if cfg.method == "euler" else _rk4_np
        x, nfe = step(field, x0, grid, record)
        if record is not None:
            times = grid
            states = np.concatenate([x0, np.concatenate(record, axis=0)], axis=0)
        else:
            times = np.array([t_a, t_b])
            states = np.concatenate([x0, x], axis=0)
        return Trajectory(times, states, nfe, cfg.step_count, 0)
    record = [] if cfg.record_trajectory else None
    x, nfe, acc, rej = _dopri5_np(field, x0, t_a, t_b, cfg, record)
    if record is not None:
        times = np.array([t_a] + [t for t, _ in record])
        states = np.concatenate([x0] + [s for _, s in record], axis=0)
    else:
        times = np.array([t_a, t_b])
        states = np.concatenate([x0, x], axis=0)
    return Trajectory(times, states, nfe, acc, rej)


def integrate_batch(field, x0: np.ndarray, t_a: float, t_b: float,
                    cfg: SolverConfig) -> tuple[np.ndarray, float]:
    """Advance a whole batch; returns (final states, mean NFE per sample).

    Fixed-step methods move the batch in lockstep (each sample sees
    step_count Euler evaluations / 4x for RK4); the adaptive method solves
    per sample so each trajectory picks its own step sizes.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    if cfg.method in FIXED_STEP_METHODS:
        grid = _fixed_grid(t_a, t_b, cfg.step_count)
        step = _euler_np if cfg.method == "euler" else _rk4_np
        x, _ = step(field, x0, grid, None)
        per_sample = cfg.step_count if cfg.method == "euler" else 4 * cfg.step_count
        return x, float(per_sample)
    finals = np.empty_like(x0)
    nfes = []
    for i in range(x0.shape[0]):
        traj = integrate(field, x0[i:i + 1], t_a, t_b, cfg)
        finals[i] = traj.final_state
        nfes.append(traj.nfe)
    return finals, float(np.mean(nfes))


def integrate_with_tape(field, x0: Tensor, t_a: float, t_b: float,
                        cfg: SolverConfig) -> tuple[Trajectory, Tensor]:
    """Unrolled fixed-step solve whose final state carries the tape.

    Gradients of any scalar built from the returned tensor reach the field
    parameters and x0 through the recorded graph.  Adaptive methods are
    rejected: their control flow depends on the solution, so the discrete
    loss is only defined for fixed grids.
    """
    if cfg.method not in FIXED_STEP_METHODS:
        raise SolverConfigError(
            "integrate_with_tape supports fixed-step methods only (euler, rk4)")
    if t_b <= t_a:
        raise ValueError("t_b must exceed t_a")
    if not isinstance(x0, Tensor):
        x0 = Tensor(np.atleast_2d(np.asarray(x0, dtype=np.float64)))
    grid = _fixed_grid(t_a, t_b, cfg.step_count)
    x = x0
    states = [x0.data.copy()]
    nfe = 0
    for i in range(len(grid) - 1):
        t, tau = grid[i], grid[i + 1] - grid[i]
        if cfg.method == "euler":
            x = x + field.forward(t, x) * tau
            nfe += 1
        else:
            k1 = field.forward(t, x)
            k2 = field.forward(t + tau / 2, x + k1 * (tau / 2))
            k3 = field.forward(t + tau / 2, x + k2 * (tau / 2))
            k4 = field.forward(t + tau, x + k3 * tau)
            x = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (tau / 6)
            nfe += 4
        states.append(x.data.copy())
    if cfg.record_trajectory:
        times, kept = grid, states
    else:
        times, kept = np.array([t_a, t_b]), [states[0], states[-1]]
    stacked = np.stack(kept, axis=0)  # (T, n, d); squeeze singleton batches
    if stacked.shape[1] == 1:
        stacked = stacked[:, 0, :]
    traj = Trajectory(times, stacked, nfe, cfg.step_count, 0)
    return traj, x
