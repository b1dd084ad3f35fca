"""Certificate assembly and verification for the structured residual field.

A certificate bundles multiplier matrices for two families of linear matrix
inequalities: one establishing input-to-state stability of
dx/dt = A0 x + sum_j A_j f_j(W_j x) + g(u), the other establishing that
trajectories contract.  All diagonal multipliers are stored as vectors; block
matrices are assembled exactly symmetric and checked with the dense Jacobi
eigensolver.  No SDP solver is involved: certificates are user-supplied or
found by the bundled scalar-multiplier search, and every accepted one is
re-verified from scratch.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field as dc_field

import numpy as np

from .fields import ControlSynthField
from .linalg import sym_eig_max, sym_eig_min
from .rng import Rng
from .solvers import SolverConfig, integrate_batch

DEFAULT_TOL = 1e-9


class CertificateError(ValueError):
    pass


@dataclass
class StabilityCertificate:
    """Multipliers for the ISS and contraction inequalities.

    Diagonal families are vectors (one per nonlinear block); `upsilon` and
    `upsilon_tilde` map index pairs to vectors.  `omega_idx`/`zeta_idx`
    record the activation decomposition; for the shipped activation menu both
    equal the block count (every menu activation has unbounded integral).
    """

    # ISS side
    p_mat: np.ndarray
    lam: list = dc_field(default_factory=list)
    xi0: np.ndarray | None = None
    xi: list = dc_field(default_factory=list)
    upsilon0: list = dc_field(default_factory=list)
    upsilon: dict = dc_field(default_factory=dict)
    phi: np.ndarray | None = None
    # contraction side
    p_tilde: np.ndarray | None = None
    lam_tilde: list = dc_field(default_factory=list)
    xi0_tilde: np.ndarray | None = None
    gamma_mul: list = dc_field(default_factory=list)
    omega_mul: list = dc_field(default_factory=list)
    upsilon_tilde: dict = dc_field(default_factory=dict)
    gamma: float = 1.0
    theta: float = 1.0
    omega_idx: int = 0
    zeta_idx: int = 0

    def to_json(self, path) -> None:
        def enc(v):
            if v is None:
                return None
            if isinstance(v, (int, float)):
                return v
            return np.asarray(v).tolist()
        doc = {
            "P": enc(self.p_mat), "Lambda": [enc(v) for v in self.lam],
            "Xi0": enc(self.xi0), "Xi": [enc(v) for v in self.xi],
            "Upsilon0": [enc(v) for v in self.upsilon0],
            "Upsilon": {f"{s},{r}": enc(v) for (s, r), v in self.upsilon.items()},
            "Phi": enc(self.phi),
            "P_tilde": enc(self.p_tilde),
            "Lambda_tilde": [enc(v) for v in self.lam_tilde],
            "Xi0_tilde": enc(self.xi0_tilde),
            "Gamma": [enc(v) for v in self.gamma_mul],
            "Omega": [enc(v) for v in self.omega_mul],
            "Upsilon_tilde": {f"{j},{r}": enc(v)
                              for (j, r), v in self.upsilon_tilde.items()},
            "gamma": self.gamma, "theta": self.theta,
            "omega_idx": self.omega_idx, "zeta_idx": self.zeta_idx,
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1)

    @classmethod
    def from_json(cls, path) -> "StabilityCertificate":
        with open(path) as fh:
            doc = json.load(fh)
        def arr(v):
            return None if v is None else np.asarray(v, dtype=np.float64)
        def pairs(d):
            return {tuple(int(x) for x in k.split(",")): arr(v)
                    for k, v in d.items()}
        return cls(
            p_mat=arr(doc["P"]), lam=[arr(v) for v in doc.get("Lambda", [])],
            xi0=arr(doc.get("Xi0")), xi=[arr(v) for v in doc.get("Xi", [])],
            upsilon0=[arr(v) for v in doc.get("Upsilon0", [])],
            upsilon=pairs(doc.get("Upsilon", {})), phi=arr(doc.get("Phi")),
            p_tilde=arr(doc.get("P_tilde")),
            lam_tilde=[arr(v) for v in doc.get("Lambda_tilde", [])],
            xi0_tilde=arr(doc.get("Xi0_tilde")),
            gamma_mul=[arr(v) for v in doc.get("Gamma", [])],
            omega_mul=[arr(v) for v in doc.get("Omega", [])],
            upsilon_tilde=pairs(doc.get("Upsilon_tilde", {})),
            gamma=float(doc.get("gamma", 1.0)), theta=float(doc.get("theta", 1.0)),
            omega_idx=int(doc.get("omega_idx", 0)),
            zeta_idx=int(doc.get("zeta_idx", 0)))


@dataclass
class CertificateVerdict:
    iss_ok: bool | None = None
    contraction_ok: bool | None = None
    lambda_max_q: float | None = None
    lambda_max_qtilde: float | None = None
    violated: list = dc_field(default_factory=list)

    def to_dict(self) -> dict:
        return {"iss_ok": self.iss_ok, "contraction_ok": self.contraction_ok,
                "lambda_max_Q": self.lambda_max_q,
                "lambda_max_Qtilde": self.lambda_max_qtilde,
                "violated": list(self.violated)}


def default_certificate(field: ControlSynthField) -> StabilityCertificate:
    """Identity-scaled starting certificate matching the field's block sizes."""
    d = field.dim
    ks = field.block_dims
    m = len(ks)
    return StabilityCertificate(
        p_mat=np.eye(d), lam=[np.ones(k) for k in ks], xi0=np.zeros(d),
        xi=[np.zeros(k) for k in ks], upsilon0=[np.zeros(k) for k in ks],
        upsilon={}, phi=np.eye(d),
        p_tilde=np.eye(d), lam_tilde=[np.zeros(k) for k in ks],
        xi0_tilde=np.zeros(d),
        gamma_mul=[np.ones(k) for k in ks], omega_mul=[np.ones(k) for k in ks],
        upsilon_tilde={}, gamma=1.0, theta=1.0, omega_idx=m, zeta_idx=m)


def _sym_block_fill(blocks: list[list[np.ndarray | None]],
                    sizes: list[int]) -> np.ndarray:
    """Assemble a symmetric matrix from an upper-triangular block grid."""
    total = sum(sizes)
    out = np.zeros((total, total))
    offs = np.concatenate([[0], np.cumsum(sizes)])
    for i in range(len(sizes)):
        for j in range(i, len(sizes)):
            b = blocks[i][j]
            if b is None:
                continue
            out[offs[i]:offs[i + 1], offs[j]:offs[j + 1]] = b
            if j > i:
                out[offs[j]:offs[j + 1], offs[i]:offs[i + 1]] = b.T
    # exact symmetry for the diagonal blocks regardless of rounding
    out = 0.5 * (out + out.T)
    return out


def _block_dim_guard(name: str, got: tuple[int, ...], want: tuple[int, ...]):
    if got != want:
        raise CertificateError(f"block {name} has shape {got}, expected {want}")


def lipschitz_diag(field: ControlSynthField, j: int) -> np.ndarray:
    """Per-coordinate Lipschitz constants L^j of the j-th activation block."""
    k = field.block_dims[j - 1]
    return np.full(k, field.activations[j - 1].lipschitz)


def assemble_q(field: ControlSynthField, cert: StabilityCertificate) -> np.ndarray:
    """ISS block matrix over (state, activation blocks, input).

    Off-diagonal multiplier couplings between two distinct nonlinear blocks
    follow the printed index pattern with transposes arranged so the products
    are well formed; they require equal block widths.
    """
    mats = field.matrices()
    d = field.dim
    ks = list(field.block_dims)
    m = field.n_blocks
    a0, p = mats["A0"], cert.p_mat
    _block_dim_guard("P", p.shape, (d, d))
    xi0 = np.zeros(d) if cert.xi0 is None else cert.xi0
    phi = np.eye(d) if cert.phi is None else cert.phi
    sizes = [d] + ks + [d]
    grid: list[list[np.ndarray | None]] = [[None] * len(sizes)
                                           for _ in range(len(sizes))]
    grid[0][0] = a0.T @ p + p @ a0 + np.diag(xi0)
    grid[0][m + 1] = p.copy()
    grid[m + 1][m + 1] = -phi
    for j in range(1, m + 1):
        a_j, w_j = mats[f"A{j}"], mats[f"W{j}"]
        lam_j = np.diag(cert.lam[j - 1])
        _block_dim_guard(f"Lambda^{j}", cert.lam[j - 1].shape, (ks[j - 1],))
        xi_j = np.diag(cert.xi[j - 1]) if cert.xi else np.zeros((ks[j - 1],) * 2)
        ups0_j = np.diag(cert.upsilon0[j - 1]) if cert.upsilon0 \
            else np.zeros((ks[j - 1],) * 2)
        grid[j][j] = a_j.T @ w_j.T @ lam_j + lam_j @ w_j @ a_j + xi_j
        grid[0][j] = p @ a_j + a0.T @ w_j.T @ lam_j + w_j.T @ ups0_j
        grid[j][m + 1] = lam_j @ w_j
    for (s, r), ups in cert.upsilon.items():
        if not (1 <= s < r <= m):
            raise CertificateError(f"Upsilon index pair {(s, r)} out of range")
        a_s, w_s = mats[f"A{s}"], mats[f"W{s}"]
        a_r, w_r = mats[f"A{r}"], mats[f"W{r}"]
        lam_s, lam_r = np.diag(cert.lam[s - 1]), np.diag(cert.lam[r - 1])
        block = a_s.T @ w_r.T @ lam_r + lam_s @ w_s @ a_r
        if np.any(ups != 0):
            if ks[s - 1] != ks[r - 1]:
                raise CertificateError(
                    f"block Q[{s + 1},{r + 1}]: cross multiplier needs equal "
                    f"widths, got {ks[s - 1]} and {ks[r - 1]}")
            block = block + (w_s @ w_r.T) @ np.diag(ups) @ (w_r @ w_s.T)
        grid[s][r] = block
    return _sym_block_fill(grid, sizes)


def verify_iss(field: ControlSynthField, cert: StabilityCertificate,
               tol: float = DEFAULT_TOL) -> CertificateVerdict:
    """Check the three ISS conditions; boundary cases pass at `tol`.

    The combined positivity condition uses the width-correct form
    P + sum_j W_j^T Lambda^j W_j > 0 so rectangular blocks are covered; for
    the empty-block field it reduces to positive definiteness of P.
    """
    verdict = CertificateVerdict()
    mats = field.matrices()
    m = field.n_blocks
    combined = cert.p_mat.copy()
    for j in range(1, min(cert.zeta_idx, m) + 1):
        w_j = mats[f"W{j}"]
        combined = combined + w_j.T @ np.diag(cert.lam[j - 1]) @ w_j
    if sym_eig_min(combined) <= tol:
        verdict.violated.append("positivity of P plus activation multipliers")
    q = assemble_q(field, cert)
    verdict.lambda_max_q = sym_eig_max(q)
    if verdict.lambda_max_q > tol:
        verdict.violated.append("Q not negative semidefinite")
    if m >= 1:
        omega_i = min(cert.omega_idx, m)
        if len(set(field.block_dims)) > 1:
            raise CertificateError("multiplier sum condition needs equal block "
                                   "widths across all activation blocks")
        total = np.zeros(field.block_dims[0])
        for j in range(1, m + 1):
            if cert.upsilon0:
                total = total + cert.upsilon0[j - 1]
        for s in range(1, omega_i + 1):
            if cert.xi:
                total = total + cert.xi[s - 1]
        for (s, r), ups in cert.upsilon.items():
            if s >= 1 and r <= omega_i:
                total = total + ups
        if np.min(total) <= tol:
            verdict.violated.append("multiplier sum not positive definite")
    verdict.iss_ok = not verdict.violated
    return verdict


def _stacked(field: ControlSynthField, diag_vectors: list[np.ndarray]) -> np.ndarray:
    """[W_1^T D_1  ...  W_M^T D_M] for diagonal multipliers D_j."""
    mats = field.matrices()
    cols = [mats[f"W{j}"].T @ np.diag(diag_vectors[j - 1])
            for j in range(1, field.n_blocks + 1)]
    return np.concatenate(cols, axis=1) if cols else np.zeros((field.dim, 0))


def assemble_qtilde(field: ControlSynthField,
                    cert: StabilityCertificate) -> np.ndarray:
    """Contraction block matrix over (error state, increment block, activation block)."""
    mats = field.matrices()
    d = field.dim
    ks = list(field.block_dims)
    m = field.n_blocks
    k_total = sum(ks)
    a0 = mats["A0"]
    pt = cert.p_tilde if cert.p_tilde is not None else np.zeros((d, d))
    _block_dim_guard("P_tilde", pt.shape, (d, d))
    xi0t = np.diag(cert.xi0_tilde) if cert.xi0_tilde is not None \
        else np.zeros((d, d))
    sizes = [d, k_total, k_total] if m else [d]
    grid: list[list[np.ndarray | None]] = [[None] * len(sizes)
                                           for _ in range(len(sizes))]
    grid[0][0] = a0.T @ pt + pt @ a0 + xi0t
    if m:
        a_stack = np.concatenate([mats[f"A{j}"] for j in range(1, m + 1)], axis=1)
        lam_t = cert.lam_tilde if cert.lam_tilde else [np.zeros(k) for k in ks]
        delta = _stacked(field, lam_t)
        gamma_stack = _stacked(field, cert.gamma_mul)
        omega_stack = _stacked(field, cert.omega_mul)
        grid[0][1] = pt @ a_stack + gamma_stack
        grid[0][2] = a0.T @ delta + omega_stack
        grid[1][1] = -2.0 * cert.gamma * np.eye(k_total)
        grid[2][2] = -2.0 * cert.theta * np.eye(k_total)
        cross = a_stack.T @ delta
        offs = np.concatenate([[0], np.cumsum(ks)])
        for (j, r), ups in cert.upsilon_tilde.items():
            if not (1 <= j <= m and 1 <= r <= m):
                raise CertificateError(f"Upsilon_tilde index pair {(j, r)} out of range")
            if np.all(ups == 0):
                continue
            if ks[j - 1] != ks[r - 1]:
                raise CertificateError(
                    f"block Qtilde[2,3] pair {(j, r)}: cross multiplier needs "
                    f"equal widths, got {ks[j - 1]} and {ks[r - 1]}")
            w_j, w_r = mats[f"W{j}"], mats[f"W{r}"]
            term = (w_j @ w_j.T) @ np.diag(ups) @ (w_r @ w_r.T)
            cross[offs[j - 1]:offs[j], offs[r - 1]:offs[r]] += term
        grid[1][2] = cross
    return _sym_block_fill(grid, sizes)


def verify_contraction(field: ControlSynthField, cert: StabilityCertificate,
                       tol: float = DEFAULT_TOL) -> CertificateVerdict:
    """Check the contraction conditions; diagonal slacks pass at the boundary."""
    verdict = CertificateVerdict()
    m = field.n_blocks
    qt = assemble_qtilde(field, cert)
    verdict.lambda_max_qtilde = sym_eig_max(qt)
    if verdict.lambda_max_qtilde > tol:
        verdict.violated.append("Qtilde not negative semidefinite")
    if m >= 1:
        if len(set(field.block_dims)) > 1:
            raise CertificateError("slack sum condition needs equal block widths")
        slack_sum = None
        for j in range(1, m + 1):
            l_j = lipschitz_diag(field, j)
            g_slack = cert.gamma_mul[j - 1] - cert.gamma * l_j
            o_slack = cert.omega_mul[j - 1] - cert.theta * l_j
            if np.min(g_slack) < -tol:
                verdict.violated.append(f"Gamma_{j} below gamma L^{j}")
            if np.min(o_slack) < -tol:
                verdict.violated.append(f"Omega_{j} below theta L^{j}")
            total_j = g_slack + o_slack
            slack_sum = total_j if slack_sum is None else slack_sum + total_j
        for (_, _), ups in cert.upsilon_tilde.items():
            slack_sum = slack_sum + ups
        if np.min(slack_sum) <= tol:
            verdict.violated.append("strict positivity of slack sum fails")
    if cert.gamma <= 0 or cert.theta <= 0:
        verdict.violated.append("gamma and theta must be positive")
    verdict.contraction_ok = not verdict.violated
    return verdict


def structure_check(field: ControlSynthField, cert: StabilityCertificate,
                    tol: float = DEFAULT_TOL) -> list[str]:
    """Definiteness and shape requirements on the raw multipliers."""
    problems = []
    if sym_eig_min(0.5 * (cert.p_mat + cert.p_mat.T)) < -tol:
        problems.append("P not positive semidefinite")
    if cert.phi is not None and sym_eig_min(cert.phi) <= tol:
        problems.append("Phi not positive definite")
    if cert.p_tilde is not None and sym_eig_min(cert.p_tilde) < -tol:
        problems.append("P_tilde not positive semidefinite")
    for name, fam in (("Lambda", cert.lam), ("Xi", cert.xi),
                      ("Upsilon0", cert.upsilon0), ("Gamma", cert.gamma_mul),
                      ("Omega", cert.omega_mul), ("Lambda_tilde", cert.lam_tilde)):
        for j, vec in enumerate(fam, start=1):
            if vec is not None and np.min(vec) < -tol:
                problems.append(f"{name}^{j} has negative diagonal entries")
    for coll, name in ((cert.upsilon, "Upsilon"),
                       (cert.upsilon_tilde, "Upsilon_tilde")):
        for key, vec in coll.items():
            if np.min(vec) < -tol:
                problems.append(f"{name}{key} has negative diagonal entries")
    if cert.gamma <= 0 or cert.theta <= 0:
        problems.append("gamma/theta not positive")
    return problems


# --------------------------------------------------------------------------
# Lyapunov evaluation and contraction regions
# --------------------------------------------------------------------------

def lyapunov_value(cert: StabilityCertificate, field: ControlSynthField,
                   xi: np.ndarray) -> float:
    """V(xi) = xi' P_tilde xi + 2 sum_j sum_i lam_tilde^j_i int_0^{(W_j xi)_i} f."""
    xi = np.asarray(xi, dtype=np.float64)
    pt = cert.p_tilde if cert.p_tilde is not None else np.zeros((field.dim,) * 2)
    val = float(xi @ pt @ xi)
    lam_t = cert.lam_tilde if cert.lam_tilde else []
    for j, lam in enumerate(lam_t, start=1):
        w = field.matrices()[f"W{j}"]
        pre = w @ xi
        ints = field.activations[j - 1].integral(pre)
        val += 2.0 * float(np.sum(lam * ints))
    return val


@dataclass
class ContractionRegion:
    level: float
    unbounded: bool

    def contains(self, v_value: float) -> bool:
        return True if self.unbounded else v_value <= self.level


def probe_level(cert: StabilityCertificate, field: ControlSynthField,
                probe_seed: int = 0, tol: float = DEFAULT_TOL) -> tuple[float, bool]:
    """(sup of V over expanding probe boxes, unbounded-growth flag).

    The menu activations all have unbounded integrals, so any certificate
    with nonzero multipliers grows without bound and gets flagged; a
    saturating V plateaus and the probed maximum is the level.
    """
    rng = Rng(probe_seed)
    d = field.dim
    levels = []
    level = 0.0
    for radius in (1.0, 4.0, 16.0, 64.0, 256.0):
        probes = rng.uniform(-radius, radius, (512, d))
        vals = [lyapunov_value(cert, field, p) for p in probes]
        level = max(level, float(np.max(vals)))
        levels.append(level)
    # saturating V plateaus before the largest box; anything still growing on
    # the final expansion is treated as radially unbounded
    unbounded = levels[-1] > levels[-2] * 1.05 + tol
    return level, unbounded


def contraction_region(cert: StabilityCertificate, field: ControlSynthField,
                       x0: np.ndarray, tol: float = DEFAULT_TOL,
                       probe_seed: int = 0):
    """Sublevel threshold max_zeta V(zeta) plus a membership predicate.

    Refuses unverified certificates.  When V keeps growing on expanding probe
    boxes the region is flagged global and the predicate is always true.
    """
    verdict = verify_contraction(field, cert, tol)
    if not verdict.contraction_ok:
        raise CertificateError(
            f"refusing region estimate for unverified certificate: {verdict.violated}")
    level, unbounded = probe_level(cert, field, probe_seed, tol)
    region = ContractionRegion(level=np.inf if unbounded else level,
                               unbounded=unbounded)

    def predicate(xi):
        return region.contains(lyapunov_value(cert, field, xi))
    return region, predicate


@dataclass
class ProbeResult:
    times: np.ndarray
    xi_norms: np.ndarray
    ratio: float

    def to_csv(self, path) -> None:
        import csv
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "xi_norm"])
            for t, v in zip(self.times, self.xi_norms):
                w.writerow([repr(float(t)), repr(float(v))])


def contraction_probe(field, x0: np.ndarray, d0: np.ndarray, horizon: float,
                      cfg: SolverConfig, n_report: int = 50) -> ProbeResult:
    """Track ||xi(t)|| for two trajectories started x0 and x0 + d0 apart.

    Both trajectories see identical inputs (any conditioning is already bound
    into `field`).  A zero d0 yields the all-zero curve with ratio 0 by
    convention.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    d0 = np.asarray(d0, dtype=np.float64)
    times = np.linspace(0.0, horizon, n_report + 1)
    if np.linalg.norm(d0) == 0.0:
        return ProbeResult(times, np.zeros(n_report + 1), 0.0)
    pair = np.stack([x0, x0 + d0], axis=0)
    norms = [float(np.linalg.norm(pair[1] - pair[0]))]
    for i in range(n_report):
        pair, _ = integrate_batch(field, pair, times[i], times[i + 1], cfg)
        norms.append(float(np.linalg.norm(pair[1] - pair[0])))
    norms = np.asarray(norms)
    return ProbeResult(times, norms, float(norms[-1] / norms[0]))


def activation_increment_gap(act, w: np.ndarray, x: np.ndarray,
                             xi: np.ndarray) -> tuple[float, float]:
    """(lhs, rhs) of the increment inequality p'p <= xi' W' L p.

    p is the activation increment between W(x+xi) and W x; the inequality
    holds for every sign-matched monotone activation with constant slope
    bound L.
    """
    pre0 = w @ x
    pre1 = w @ (x + xi)
    p = act(pre1) - act(pre0)
    lhs = float(p @ p)
    rhs = float((w @ xi) @ (act.lipschitz * p))
    return lhs, rhs


# --------------------------------------------------------------------------
# bundled heuristic search over identity-scaled multipliers
# --------------------------------------------------------------------------

def _candidate_cert(field: ControlSynthField, p, lam, xi0, xi, ups0, phi,
                    pt, lam_t, xi0t, gamma, theta, slack) -> StabilityCertificate:
    ks = field.block_dims
    m = field.n_blocks
    cert = default_certificate(field)
    cert.p_mat = p * np.eye(field.dim)
    cert.xi0 = xi0 * np.ones(field.dim)
    cert.phi = phi * np.eye(field.dim)
    cert.lam = [lam * np.ones(k) for k in ks]
    cert.xi = [xi * np.ones(k) for k in ks]
    cert.upsilon0 = [ups0 * np.ones(k) for k in ks]
    cert.p_tilde = pt * np.eye(field.dim)
    cert.xi0_tilde = xi0t * np.ones(field.dim)
    cert.lam_tilde = [lam_t * np.ones(k) for k in ks]
    cert.gamma = gamma
    cert.theta = theta
    cert.gamma_mul = [gamma * lipschitz_diag(field, j) + slack
                      for j in range(1, m + 1)]
    cert.omega_mul = [theta * lipschitz_diag(field, j) + slack
                      for j in range(1, m + 1)]
    return cert


def search_certificate(field: ControlSynthField, attempts: int = 400,
                       seed: int = 0, tol: float = DEFAULT_TOL):
    """Grid-then-random search over scalar multiples of identity multipliers.

    A deterministic coarse grid runs first, then `attempts` random draws.
    Returns (certificate, verdict) for the first candidate passing both the
    ISS and contraction checks, or (best candidate, its verdict) when none
    passes; callers must inspect the verdict.
    """
    rng = Rng(seed)
    best = None
    best_margin = -np.inf

    def grid_candidates():
        for p in (1.0, 0.3):
            for lam in (0.25, 1.0):
                for ups0 in (0.5, 2.5):
                    for xi0 in (0.1, 1.0):
                        for gamma in (0.5, 1.0):
                            yield _candidate_cert(
                                field, p, lam, xi0, 0.5 * xi0, ups0,
                                phi=3.0 * p, pt=p, lam_t=0.5 * lam,
                                xi0t=xi0, gamma=gamma, theta=gamma,
                                slack=0.5 * gamma)

    def random_candidates():
        for _ in range(attempts):
            s = lambda: float(10.0 ** rng.uniform(-2.0, 1.0))
            yield _candidate_cert(field, s(), s(), s(), s(), s(), s(), s(),
                                  s(), s(), s(), s(),
                                  slack=float(10.0 ** rng.uniform(-3.0, 0.0)))

    for cert in itertools.chain(grid_candidates(), random_candidates()):
        if structure_check(field, cert, tol):
            continue
        iss = verify_iss(field, cert, tol)
        con = verify_contraction(field, cert, tol)
        margin = -max(iss.lambda_max_q, con.lambda_max_qtilde)
        if iss.iss_ok and con.contraction_ok:
            verdict = CertificateVerdict(True, True, iss.lambda_max_q,
                                         con.lambda_max_qtilde, [])
            return cert, verdict
        if margin > best_margin:
            best_margin = margin
            best = (cert, CertificateVerdict(iss.iss_ok, con.contraction_ok,
                                             iss.lambda_max_q,
                                             con.lambda_max_qtilde,
                                             iss.violated + con.violated))
    return best
