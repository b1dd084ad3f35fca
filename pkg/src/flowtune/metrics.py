"""Evaluation measures: exact small-sample W2, reconstruction error, straightness."""

from __future__ import annotations

import numpy as np

from .coupling import CouplingBatch, pairwise_sq_dists
from .linalg import solve_assignment
from .solvers import SolverConfig, Trajectory, integrate_batch

MAX_W2_SAMPLES = 512


def wasserstein2(a: np.ndarray, b: np.ndarray) -> float:
    """Exact 2-Wasserstein distance between equal-size empirical measures."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError("sample sets must have identical shape")
    if a.shape[0] > MAX_W2_SAMPLES:
        raise ValueError(f"exact matching limited to {MAX_W2_SAMPLES} samples")
    d = pairwise_sq_dists(a, b)
    perm = solve_assignment(d)
    return float(np.sqrt(np.mean(d[np.arange(len(a)), perm])))


def straightness_deviation(traj: Trajectory) -> float:
    """Max interior distance to the start-end chord, relative to chord length.

    Zero for straight paths.  When start == end the chord degenerates; the
    raw maximal distance to that point is returned instead (flagged by the
    caller via the zero chord).
    """
    states = traj.states
    if states.ndim != 2 or len(states) < 3:
        raise ValueError("need a recorded single-sample trajectory with >= 3 points")
    p0, p1 = states[0], states[-1]
    chord = p1 - p0
    chord_len = float(np.linalg.norm(chord))
    rel = states[1:-1] - p0
    if chord_len < 1e-12:
        return float(np.max(np.linalg.norm(rel, axis=1)))
    unit = chord / chord_len
    proj = rel @ unit
    perp = rel - proj[:, None] * unit
    return float(np.max(np.linalg.norm(perp, axis=1)) / chord_len)


def reconstruction_mse(batch: CouplingBatch, field, cfg: SolverConfig) -> tuple[float, float]:
    """Mean squared reconstruction error through a forward solve.

    Returns (mse, mean NFE per sample).  Any solver is allowed here; this is
    the inference-mode counterpart of the training loss.  `field` may be a
    plain velocity field (solved on [0, 1]) or a stack exposing
    `reconstruct_np`, which owns its own time window.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    if hasattr(field, "reconstruct_np"):
        finals, nfe = field.reconstruct_np(batch.x0, cfg)
    else:
        finals, nfe = integrate_batch(field, batch.x0, 0.0, 1.0, cfg)
    mse = float(np.mean(np.sum((batch.x1 - finals) ** 2, axis=1)))
    return mse, nfe
