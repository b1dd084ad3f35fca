"""Dense symmetric eigensolver and exact minimum-cost assignment."""

from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment

SYMMETRY_TOL = 1e-10


class AsymmetricMatrixError(ValueError):
    def __init__(self, asymmetry: float):
        super().__init__(f"matrix is not symmetric: max |M - M^T| = {asymmetry:.3e}")
        self.asymmetry = asymmetry


def _check_symmetric(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    asym = float(np.max(np.abs(m - m.T))) if m.size else 0.0
    if asym > SYMMETRY_TOL:
        raise AsymmetricMatrixError(asym)
    return 0.5 * (m + m.T)


def sym_eig(m: np.ndarray, off_tol: float = 1e-12, max_sweeps: int = 100) -> np.ndarray:
    """All eigenvalues of a symmetric matrix by cyclic Jacobi rotations.

    Iterates sweeps until the off-diagonal Frobenius norm falls below
    `off_tol`.  Dense and simple; intended for the small (<= ~30 dim) block
    matrices arising in certificate checks.
    """
    a = _check_symmetric(m).copy()
    n = a.shape[0]
    if n == 0:
        return np.array([])
    if n == 1:
        return a[0].copy()
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2) * 2.0)
        if off < off_tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < off_tol / (n * n):
                    continue
                # classic Jacobi rotation annihilating a[p, q]
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot_p = c * a[p, :] - s * a[q, :]
                rot_q = s * a[p, :] + c * a[q, :]
                a[p, :], a[q, :] = rot_p, rot_q
                rot_p = c * a[:, p] - s * a[:, q]
                rot_q = s * a[:, p] + c * a[:, q]
                a[:, p], a[:, q] = rot_p, rot_q
    return np.sort(np.diag(a))


def sym_eig_max(m: np.ndarray) -> float:
    """Largest eigenvalue of a symmetric matrix (Jacobi iteration)."""
    vals = sym_eig(m)
    if vals.size == 0:
        raise ValueError("empty matrix has no eigenvalues")
    return float(vals[-1])


def sym_eig_min(m: np.ndarray) -> float:
    vals = sym_eig(m)
    if vals.size == 0:
        raise ValueError("empty matrix has no eigenvalues")
    return float(vals[0])


def solve_assignment(cost: np.ndarray) -> np.ndarray:
    """Permutation pi minimizing sum_i cost[i, pi[i]] over a square cost matrix.

    Backed by scipy's exact Jonker-Volgenant solver; brute-force enumeration
    in the test suite pins down exactness for small n.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"expected a square cost matrix, got shape {cost.shape}")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite entries")
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(cost.shape[0], dtype=np.int64)
    perm[rows] = cols
    return perm
