"""Train-to-inference error bounds and their empirical validation harness.

The bounds convert a sup-norm field discrepancy delta, a curvature bound M
along the true path, an initial offset and a step schedule into a guaranteed
ceiling on the final reconstruction error of an explicit Euler solve against
the exact flow.  `validate_bound` integrates perturbed copies of analytic
fields and hard-fails on any measured excess: it is the falsifier for the
bound, not a soft report.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import ConstantField, LinearField, PerturbedField, decay_field


class BoundViolation(AssertionError):
    def __init__(self, report: "ErrorBoundReport"):
        super().__init__(f"measured error {report.measured:.6e} exceeds bound "
                         f"{report.bound_variable:.6e} in case {report.case!r}")
        self.report = report


def bound_variable_step(l_u: float, delta: float, m_bound: float, eps0: float,
                        taus) -> float:
    """Error ceiling for an arbitrary step schedule.

    exp(l_u * t_{N-1}) * (sum_j (delta tau_j + M tau_j^2 / 2) + eps0) with
    t_{N-1} the time reached before the final step.
    """
    taus = np.asarray(taus, dtype=np.float64)
    if np.any(taus <= 0) or min(l_u, delta, m_bound, eps0) < 0:
        raise ValueError("inputs must be nonnegative with positive step sizes")
    t_last = float(np.sum(taus[:-1]))
    local = float(np.sum(delta * taus + 0.5 * m_bound * taus ** 2))
    return float(np.exp(l_u * t_last) * (local + eps0))


def bound_uniform_step(l_u: float, delta: float, m_bound: float, eps0: float,
                       tau0: float) -> float:
    """Sharper ceiling on uniform grids covering [0, 1] (N tau0 = 1).

    exp(l_u) eps0 + (M tau0 + 2 delta) / (2 l_u) * (exp(l_u) - 1), with the
    l_u -> 0 limit handled exactly.
    """
    if tau0 <= 0 or min(l_u, delta, m_bound, eps0) < 0:
        raise ValueError("inputs must be nonnegative with tau0 > 0")
    growth = np.expm1(l_u) / l_u if l_u > 1e-12 else 1.0
    return float(np.exp(l_u) * eps0 + 0.5 * (m_bound * tau0 + 2.0 * delta) * growth)


def gronwall_discrete(lam: float, taus, xis) -> np.ndarray:
    """Per-index ceilings exp(lam * t_{n-1}) * sum_{j<=n} xi_j for n = 1..N.

    This is the growth lemma behind the variable-step bound; the test suite
    checks it dominates the defining recursion on random nonnegative input.
    """
    taus = np.asarray(taus, dtype=np.float64)
    xis = np.asarray(xis, dtype=np.float64)
    if lam < 0 or np.any(taus <= 0) or np.any(xis < 0):
        raise ValueError("need lam >= 0, positive taus, nonnegative xis")
    n_max = len(xis) - 1
    if len(taus) < n_max:
        raise ValueError("need at least len(xis) - 1 step sizes")
    out = np.empty(n_max)
    for n in range(1, n_max + 1):
        t_prev = float(np.sum(taus[:n - 1]))
        out[n - 1] = np.exp(lam * t_prev) * float(np.sum(xis[:n + 1]))
    return out


def gronwall_recursion(lam: float, taus, xis) -> np.ndarray:
    """The defining recursion taken with equality (oracle for the lemma)."""
    taus = np.asarray(taus, dtype=np.float64)
    xis = np.asarray(xis, dtype=np.float64)
    n_max = len(xis) - 1
    vals = np.zeros(n_max + 1)
    for n in range(1, n_max + 1):
        vals[n] = lam * float(np.sum(taus[:n - 1] * vals[1:n])) \
            + float(np.sum(xis[:n + 1]))
    return vals[1:]


# --------------------------------------------------------------------------
# empirical validation harness
# --------------------------------------------------------------------------

@dataclass
class ErrorBoundReport:
    case: str
    l_u: float
    delta: float
    m_bound: float
    eps0: float
    taus: np.ndarray
    bound_variable: float
    bound_uniform: float | None
    measured: float
    passed: bool


def euler_on_schedule(field, x0: np.ndarray, taus) -> np.ndarray:
    """Explicit Euler over an arbitrary positive step schedule from t = 0."""
    x = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    t = 0.0
    for tau in taus:
        x = x + tau * field.velocity(t, x)
        t += tau
    return x[0]


def uniform_schedule(n: int, t_end: float = 1.0) -> np.ndarray:
    return np.full(n, t_end / n)


def geometric_schedule(n: int, ratio: float, t_end: float = 1.0) -> np.ndarray:
    """Decreasing-step schedule tau_j proportional to ratio^j (ratio <= 1)."""
    if not 0 < ratio <= 1:
        raise ValueError("ratio must lie in (0, 1]; increasing schedules void "
                         "the variable-step ceiling")
    raw = ratio ** np.arange(n)
    return raw * (t_end / raw.sum())


def validate_bound(truth, learned, x0_set, schedules: dict[str, np.ndarray],
                   delta: float, eps0: float = 0.0,
                   case_prefix: str = "case") -> list[ErrorBoundReport]:
    """Integrate `learned` on each schedule and check the measured error.

    `truth` must expose `exact_flow`, `lipschitz_bound` and
    `curvature_bound`; `learned` stays within sup distance delta of it by
    construction.  An eps0 offset is injected on the numerical start state.
    Raises BoundViolation the moment any measured error exceeds the
    variable-step ceiling (or the uniform one on uniform grids).
    """
    reports = []
    for i, x0 in enumerate(np.atleast_2d(np.asarray(x0_set, dtype=np.float64))):
        for sched_name, taus in schedules.items():
            taus = np.asarray(taus, dtype=np.float64)
            t_end = float(np.sum(taus))
            l_u = truth.lipschitz_bound()
            m_bound = truth.curvature_bound(x0, t_end)
            start = x0.copy()
            if eps0 > 0:
                start = start + eps0 / np.sqrt(len(x0)) * np.ones_like(x0)
            x_num = euler_on_schedule(learned, start, taus)
            x_true = truth.exact_flow(x0, 0.0, t_end)
            measured = float(np.linalg.norm(x_true - x_num))
            b_var = bound_variable_step(l_u, delta, m_bound, eps0, taus)
            uniform = bool(np.allclose(taus, taus[0], rtol=0, atol=1e-15))
            b_uni = bound_uniform_step(l_u, delta, m_bound, eps0, taus[0]) \
                if uniform and abs(t_end - 1.0) < 1e-12 else None
            # solver arithmetic and the bound evaluate through different float
            # paths; boundary-exact cases need ulp-scale headroom
            slack = 1e-12 * (1.0 + b_var)
            ok = measured <= b_var + slack and \
                (b_uni is None or measured <= b_uni + slack)
            report = ErrorBoundReport(
                case=f"{case_prefix}/x0_{i}/{sched_name}", l_u=l_u, delta=delta,
                m_bound=m_bound, eps0=eps0, taus=taus, bound_variable=b_var,
                bound_uniform=b_uni, measured=measured, passed=ok)
            if not ok:
                raise BoundViolation(report)
            reports.append(report)
    return reports


def standard_suite() -> list[ErrorBoundReport]:
    """The shipped analytic validation suite: fields x deltas x schedules.

    Spans delta in {0, 0.05, 0.1} over contracting, expanding and constant
    truths with uniform and decreasing geometric schedules.
    """
    fields = {
        "decay": decay_field(2),
        "stable_diag": LinearField(np.diag([-2.0, -0.5])),
        "expanding_diag": LinearField(np.diag([0.5, 0.25])),
        "constant": ConstantField(np.array([1.0, 0.5])),
    }
    schedules = {
        "uniform_20": uniform_schedule(20),
        "uniform_80": uniform_schedule(80),
        "geometric_20": geometric_schedule(20, 0.85),
    }
    x0_set = np.array([[1.0, -0.5], [0.25, 2.0]])
    reports = []
    for field_name, truth in fields.items():
        for delta in (0.0, 0.05, 0.1):
            learned = PerturbedField(truth, delta) if delta > 0 else truth
            reports.extend(validate_bound(
                truth, learned, x0_set, schedules, delta,
                case_prefix=f"{field_name}/delta_{delta:g}"))
    return reports


def estimate_curvature(field, x0: np.ndarray, t_end: float = 1.0,
                       n_grid: int = 400) -> float:
    """Finite-difference estimate of sup |d^2 x / dt^2| along a solved path.

    Reported for learned fields only; estimates may under-bound the true
    curvature, so they are never fed into bound assertions.
    """
    from .solvers import SolverConfig, integrate
    cfg = SolverConfig(method="rk4", step_count=n_grid, record_trajectory=True)
    traj = integrate(field, x0, 0.0, t_end, cfg)
    dt = traj.times[1] - traj.times[0]
    second = (traj.states[2:] - 2 * traj.states[1:-1] + traj.states[:-2]) / dt ** 2
    return float(np.max(np.linalg.norm(second, axis=1)))
