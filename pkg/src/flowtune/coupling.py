"""Pairing of noise and data batches: independent or exact minibatch OT."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import solve_assignment

COUPLING_METHODS = ("independent", "minibatch_ot")
MAX_EXACT_ASSIGNMENT = 512


@dataclass
class CouplingBatch:
    x0: np.ndarray
    x1: np.ndarray
    method: str
    cost: float

    def __len__(self) -> int:
        return len(self.x0)


def pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sum(diff * diff, axis=2)


def couple(x0: np.ndarray, x1: np.ndarray, method: str = "independent") -> CouplingBatch:
    """Pair two equal-size batches.

    `independent` keeps index order; `minibatch_ot` permutes x1 by the exact
    minimum-cost assignment under squared Euclidean distance, so the returned
    cost is the optimal transport cost of the empirical batch marginals.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ValueError(f"batch shape mismatch: {x0.shape} vs {x1.shape}")
    if method not in COUPLING_METHODS:
        raise ValueError(f"unknown coupling method {method!r}")
    if method == "independent":
        cost = float(np.mean(np.sum((x0 - x1) ** 2, axis=1))) if len(x0) else 0.0
        return CouplingBatch(x0, x1, method, cost)
    n = x0.shape[0]
    if n > MAX_EXACT_ASSIGNMENT:
        raise ValueError(f"batch of {n} exceeds exact-assignment limit "
                         f"{MAX_EXACT_ASSIGNMENT}")
    dists = pairwise_sq_dists(x0, x1)
    perm = solve_assignment(dists)
    cost = float(np.mean(dists[np.arange(n), perm]))
    return CouplingBatch(x0, x1[perm], method, cost)
