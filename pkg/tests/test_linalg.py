"""Eigensolver and assignment against brute-force oracles."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowtune.linalg import (AsymmetricMatrixError, solve_assignment, sym_eig,
                             sym_eig_max, sym_eig_min)
from flowtune.rng import Rng


def charpoly_roots_max(m: np.ndarray) -> float:
    """Largest root of the characteristic polynomial (oracle for n <= 4)."""
    coeffs = np.poly(m)
    roots = np.roots(coeffs)
    return float(np.max(roots.real))


def brute_force_assignment(cost: np.ndarray):
    n = cost.shape[0]
    best, best_perm = np.inf, None
    for perm in itertools.permutations(range(n)):
        total = sum(cost[i, perm[i]] for i in range(n))
        if total < best:
            best, best_perm = total, perm
    return best, best_perm


def test_eig_diagonal_cases():
    assert sym_eig_max(np.diag([-2.0, -1.0])) == pytest.approx(-1.0, abs=1e-10)
    assert sym_eig_max(np.array([[1.0, 0.0], [0.0, -1.0]])) == pytest.approx(1.0)


def test_eig_matches_charpoly_for_small_matrices():
    rng = Rng(2024)
    for _ in range(200):
        n = int(rng.integers(1, 5))
        a = rng.normal((n, n))
        m = a + a.T
        assert sym_eig_max(m) == pytest.approx(charpoly_roots_max(m), abs=1e-6)


def test_eig_full_spectrum_sorted():
    rng = Rng(7)
    a = rng.normal((6, 6))
    m = a + a.T
    vals = sym_eig(m)
    assert np.all(np.diff(vals) >= 0)
    assert np.allclose(vals, np.linalg.eigvalsh(m), atol=1e-8)
    assert sym_eig_min(m) == pytest.approx(vals[0])


def test_eig_rejects_asymmetric():
    with pytest.raises(AsymmetricMatrixError) as exc:
        sym_eig_max(np.array([[0.0, 1.0], [0.0, 0.0]]))
    assert exc.value.asymmetry == pytest.approx(1.0)


def test_assignment_trivial_cases():
    assert list(solve_assignment(np.array([[0.0, 5.0], [5.0, 0.0]]))) == [0, 1]
    assert list(solve_assignment(np.array([[5.0, 0.0], [0.0, 5.0]]))) == [1, 0]


def test_assignment_random_5x5_vs_enumeration():
    rng = Rng(99)
    for _ in range(50):
        cost = rng.integers(0, 50, (5, 5)).astype(float)
        perm = solve_assignment(cost)
        got = float(cost[np.arange(5), perm].sum())
        best, _ = brute_force_assignment(cost)
        assert got == pytest.approx(best)


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2 ** 31 - 1))
def test_assignment_matches_brute_force(n, seed):
    cost = Rng(seed).uniform(0.0, 10.0, (n, n))
    perm = solve_assignment(cost)
    assert sorted(perm) == list(range(n))
    got = float(cost[np.arange(n), perm].sum())
    best, _ = brute_force_assignment(cost)
    assert got <= best + 1e-9


def test_assignment_rejects_bad_input():
    with pytest.raises(ValueError):
        solve_assignment(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        solve_assignment(np.array([[np.inf, 0.0], [0.0, 1.0]]))
