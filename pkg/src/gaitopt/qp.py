"""Convex quadratic programming with parameter sensitivities.

Solves problems of the form

    min_z  0.5 z'Qz + q'z   s.t.  Az = b,  Gz <= h

with a dense Mehrotra-style predictor-corrector interior-point method
followed by an active-set polish step, and differentiates the optimal
cost with respect to problem-data parameters by implicit differentiation
of the KKT conditions.  A small LP front end with a deterministic
minimum-norm tie-break sits on top of the same solver.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import json

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, onenormest, splu

from .errors import (
    DegenerateError,
    DimensionMismatchError,
    LpInfeasibleError,
    LpUnboundedError,
    SingularKktError,
    SolverFailure,
)

# Default tolerances.  KKT residuals are checked against TOL_KKT (with a
# relative guard for badly scaled data); ACTIVE_TOL classifies constraints
# as active for reporting; STRICT_TOL flags strict-complementarity failures.
TOL_KKT = 1e-9
ACTIVE_TOL = 1e-7
STRICT_TOL = 1e-7
PSD_SHIFT = 1e-8
LP_CURVATURE = 2e-10  # quadratic perturbation used by the LP phase-1 solve


class QpStatus(Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    MAX_ITER = "max_iter"
    DEGENERATE = "degenerate"


@dataclass(frozen=True)
class QpProblem:
    """Problem data.  A/b and G/h may be empty (shape (0, n))."""

    Q: np.ndarray
    q: np.ndarray
    A: np.ndarray
    b: np.ndarray
    G: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        n = self.q.shape[0]
        if self.Q.shape != (n, n):
            raise DimensionMismatchError(f"Q shape {self.Q.shape} vs n={n}")
        if self.A.shape[1] != n or self.A.shape[0] != self.b.shape[0]:
            raise DimensionMismatchError("equality block shapes disagree")
        if self.G.shape[1] != n or self.G.shape[0] != self.h.shape[0]:
            raise DimensionMismatchError("inequality block shapes disagree")
        scale = max(1.0, float(np.abs(self.Q).max()) if n else 1.0)
        if n and float(np.abs(self.Q - self.Q.T).max()) > 1e-12 * scale:
            raise DimensionMismatchError("Q is not symmetric to 1e-12 relative")

    @property
    def n(self) -> int:
        return self.q.shape[0]

    @property
    def n_eq(self) -> int:
        return self.b.shape[0]

    @property
    def n_in(self) -> int:
        return self.h.shape[0]

    def objective(self, z: np.ndarray) -> float:
        return float(0.5 * z @ (self.Q @ z) + self.q @ z)

    def to_json(self) -> str:
        """Debug dump with dense row-major arrays under keys Q,q,A,b,G,h."""
        doc = {
            "Q": self.Q.tolist(),
            "q": self.q.tolist(),
            "A": self.A.tolist(),
            "b": self.b.tolist(),
            "G": self.G.tolist(),
            "h": self.h.tolist(),
        }
        return json.dumps(doc)

    @staticmethod
    def from_json(text: str) -> "QpProblem":
        doc = json.loads(text)
        q = np.asarray(doc["q"], dtype=float)
        n = q.shape[0]

        def arr2(key):
            a = np.asarray(doc[key], dtype=float)
            return a.reshape(-1, n) if a.size else np.zeros((0, n))

        return QpProblem(
            Q=np.asarray(doc["Q"], dtype=float).reshape(n, n),
            q=q,
            A=arr2("A"),
            b=np.asarray(doc["b"], dtype=float),
            G=arr2("G"),
            h=np.asarray(doc["h"], dtype=float),
        )


@dataclass
class QpSolution:
    """Primal/dual solution with active-set metadata.

    Residuals are measured against the problem as solved; when PSD
    regularization was applied, ``regularization`` holds the diagonal
    shift and the KKT residuals refer to the shifted Hessian.
    """

    z: np.ndarray
    lam: np.ndarray
    nu: np.ndarray
    obj: float
    active_set: np.ndarray
    status: QpStatus
    iterations: int = 0
    stat_residual: float = np.inf
    feas_residual: float = np.inf
    comp_residual: float = np.inf
    regularization: float = 0.0

    @property
    def kkt_residual(self) -> float:
        return max(self.stat_residual, self.feas_residual, self.comp_residual)


@dataclass
class ParamJacobians:
    """Per-parameter derivatives of the six QP data blocks.

    Each list has one entry per scalar parameter; matrix entries are
    scipy.sparse matrices (or None for an all-zero block), vector entries
    are dense arrays (or None).
    """

    dQ: list = field(default_factory=list)
    dq: list = field(default_factory=list)
    dA: list = field(default_factory=list)
    db: list = field(default_factory=list)
    dG: list = field(default_factory=list)
    dh: list = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.dq)

    @staticmethod
    def zeros(count: int) -> "ParamJacobians":
        none = lambda: [None] * count
        return ParamJacobians(none(), none(), none(), none(), none(), none())

    def check_shapes(self, problem: QpProblem):
        for name, lst, shape in (
            ("dQ", self.dQ, (problem.n, problem.n)),
            ("dA", self.dA, (problem.n_eq, problem.n)),
            ("dG", self.dG, (problem.n_in, problem.n)),
        ):
            for m in lst:
                if m is not None and m.shape != shape:
                    raise DimensionMismatchError(f"{name} block shape {m.shape} != {shape}")
        for name, lst, size in (
            ("dq", self.dq, problem.n),
            ("db", self.db, problem.n_eq),
            ("dh", self.dh, problem.n_in),
        ):
            for v in lst:
                if v is not None and v.shape != (size,):
                    raise DimensionMismatchError(f"{name} entry shape {v.shape} != ({size},)")


@dataclass
class SensitivityResult:
    grad: np.ndarray
    dz: Optional[np.ndarray]
    conditioning: float
    degenerate_indices: list


def _min_eig_below(Q: np.ndarray, threshold: float) -> bool:
    """Cheap test for lambda_min(Q) < threshold via a shifted Cholesky probe."""
    n = Q.shape[0]
    if n == 0:
        return False
    try:
        np.linalg.cholesky(Q - threshold * np.eye(n))
        return False
    except np.linalg.LinAlgError:
        return True


def _chol_factor(H):
    return scipy.linalg.cho_factor(H, lower=True, check_finite=False)


def _chol_solve(fac, rhs):
    return scipy.linalg.cho_solve(fac, rhs, check_finite=False)


def _max_step(v: np.ndarray, dv: np.ndarray) -> float:
    """Largest alpha <= 1 keeping v + alpha*dv >= 0 for strictly positive v."""
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return min(1.0, float(np.min(-v[neg] / dv[neg])))


def _residual_scales(problem, z, lam, nu):
    Qz = problem.Q @ z
    sd = 1.0 + max(
        float(np.abs(problem.q).max(initial=0.0)),
        float(np.abs(Qz).max(initial=0.0)),
        float(np.abs(problem.A.T @ nu).max(initial=0.0)) if problem.n_eq else 0.0,
        float(np.abs(problem.G.T @ lam).max(initial=0.0)) if problem.n_in else 0.0,
    )
    sp_ = 1.0 + max(
        float(np.abs(problem.b).max(initial=0.0)),
        float(np.abs(problem.h).max(initial=0.0)),
        float(np.abs(problem.G @ z).max(initial=0.0)) if problem.n_in else 0.0,
        float(np.abs(problem.A @ z).max(initial=0.0)) if problem.n_eq else 0.0,
    )
    return sd, sp_


def _polish(Qr, problem, z, lam, nu, tol):
    """Re-solve on the apparent active set; returns refined (z, lam, nu) or None."""
    n, m_eq, m_in = problem.n, problem.n_eq, problem.n_in
    slack = problem.h - problem.G @ z if m_in else np.zeros(0)
    act = np.flatnonzero(lam >= slack) if m_in else np.zeros(0, dtype=int)
    Ga = problem.G[act]
    k = act.size
    dim = n + m_eq + k
    K = np.zeros((dim, dim))
    K[:n, :n] = Qr
    K[:n, n : n + m_eq] = problem.A.T
    K[:n, n + m_eq :] = Ga.T
    K[n : n + m_eq, :n] = problem.A
    K[n + m_eq :, :n] = Ga
    rhs = np.concatenate([-problem.q, problem.b, problem.h[act]])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        return None
    zp = sol[:n]
    nup = sol[n : n + m_eq]
    lamp = np.zeros(m_in)
    lamp[act] = sol[n + m_eq :]
    slackp = problem.h - problem.G @ zp if m_in else np.zeros(0)
    sd, spr = _residual_scales(problem, zp, lamp, nup)
    if m_in and (lamp.min(initial=0.0) < -tol * sd or slackp.min(initial=0.0) < -tol * spr):
        return None
    return zp, lamp, nup


def _certify_infeasible(problem, lam, nu) -> bool:
    """Farkas-type certificate: A'nu + G'lam ~ 0, lam >= 0, b'nu + h'lam < 0."""
    t = max(
        float(np.abs(lam).max(initial=0.0)),
        float(np.abs(nu).max(initial=0.0)),
    )
    if t <= 0.0:
        return False
    lam_n = np.maximum(lam, 0.0) / t
    nu_n = nu / t
    ray = np.zeros(problem.n)
    if problem.n_in:
        ray = ray + problem.G.T @ lam_n
    if problem.n_eq:
        ray = ray + problem.A.T @ nu_n
    gap = float(problem.b @ nu_n) + float(problem.h @ lam_n)
    row_scale = 1.0 + max(
        float(np.abs(problem.A).max(initial=0.0)),
        float(np.abs(problem.G).max(initial=0.0)),
    )
    return float(np.abs(ray).max(initial=0.0)) <= 1e-8 * row_scale and gap < -1e-8


def solve_qp(
    problem: QpProblem,
    warm_start: Optional[QpSolution] = None,
    tol: float = TOL_KKT,
    max_iter: int = 200,
) -> QpSolution:
    """Solve the QP; returns a solution whose status reports the outcome.

    On OPTIMAL the KKT residuals are below ``tol`` (scaled by the data
    magnitude for badly scaled problems).  A primal infeasibility
    certificate yields INFEASIBLE; otherwise the iteration cap yields
    MAX_ITER with the residuals reached.
    """
    n, m_eq, m_in = problem.n, problem.n_eq, problem.n_in
    Q = 0.5 * (problem.Q + problem.Q.T)
    reg = 0.0
    if _min_eig_below(Q, 1e-10):
        reg = PSD_SHIFT
    Qr = Q + reg * np.eye(n)

    def finish(z, lam, nu, iters, status=None, try_polish=True):
        if try_polish:
            polished = _polish(Qr, problem, z, lam, nu, tol)
            if polished is not None:
                zp, lamp, nup = polished
                old = _kkt_residuals(Qr, problem, z, lam, nu)
                new = _kkt_residuals(Qr, problem, zp, lamp, nup)
                if max(new) <= max(old):
                    z, lam, nu = zp, lamp, nup
        rs, rf, rc = _kkt_residuals(Qr, problem, z, lam, nu)
        sd, spr = _residual_scales(problem, z, lam, nu)
        ok = rs <= tol * sd and rf <= tol * spr and rc <= tol * sd
        if status is None:
            status = QpStatus.OPTIMAL if ok else QpStatus.MAX_ITER
        slack = problem.h - problem.G @ z if m_in else np.zeros(0)
        active = np.flatnonzero(slack <= ACTIVE_TOL) if m_in else np.zeros(0, dtype=int)
        return QpSolution(
            z=z,
            lam=lam,
            nu=nu,
            obj=problem.objective(z),
            active_set=active,
            status=status,
            iterations=iters,
            stat_residual=rs,
            feas_residual=rf,
            comp_residual=rc,
            regularization=reg,
        )

    if m_in == 0:
        # Pure equality-constrained problem: a single KKT solve.
        dim = n + m_eq
        K = np.zeros((dim, dim))
        K[:n, :n] = Qr
        K[:n, n:] = problem.A.T
        K[n:, :n] = problem.A
        rhs = np.concatenate([-problem.q, problem.b])
        try:
            sol = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError as exc:
            raise SolverFailure(f"singular equality KKT system: {exc}") from exc
        return finish(sol[:n], np.zeros(0), sol[n:], 1)

    z, s, lam, nu = _initial_point(Qr, problem, warm_start)
    iters = 0
    for iters in range(1, max_iter + 1):
        r_dual = Qr @ z + problem.q + problem.G.T @ lam
        if m_eq:
            r_dual = r_dual + problem.A.T @ nu
        r_in = problem.G @ z + s - problem.h
        r_eq = problem.A @ z - problem.b if m_eq else np.zeros(0)
        mu = float(s @ lam) / m_in

        sd, spr = _residual_scales(problem, z, lam, nu)
        if (
            float(np.abs(r_dual).max()) <= 0.1 * tol * sd
            and float(np.abs(r_in).max(initial=0.0)) <= 0.1 * tol * spr
            and float(np.abs(r_eq).max(initial=0.0)) <= 0.1 * tol * spr
            and mu <= 0.1 * tol * sd
        ):
            return finish(z, lam, nu, iters)
        # Once the gap is small, one active-set polish often lands the exact
        # solution and saves the slow tail of the interior-point iteration.
        if mu <= 1e2 * tol * sd and float(np.abs(r_in).max(initial=0.0)) <= 1e-6 * spr:
            polished = _polish(Qr, problem, z, lam, nu, tol)
            if polished is not None:
                zp, lamp, nup = polished
                rs, rf, rc = _kkt_residuals(Qr, problem, zp, lamp, nup)
                sd2, spr2 = _residual_scales(problem, zp, lamp, nup)
                if rs <= tol * sd2 and rf <= tol * spr2 and rc <= tol * sd2:
                    return finish(zp, lamp, nup, iters, try_polish=False)

        if not np.isfinite(z).all() or float(np.abs(z).max()) > 1e14:
            return finish(z, lam, nu, iters, status=QpStatus.MAX_ITER)
        primal_bad = (
            float(np.abs(r_in).max(initial=0.0)) > 1e-6 * spr
            or float(np.abs(r_eq).max(initial=0.0)) > 1e-6 * spr
        )
        if (
            primal_bad
            and max(np.abs(lam).max(initial=0.0), np.abs(nu).max(initial=0.0)) > 1e7
            and _certify_infeasible(problem, lam, nu)
        ):
            return finish(z, lam, nu, iters, status=QpStatus.INFEASIBLE)

        d = lam / s
        H = Qr + (problem.G.T * d) @ problem.G
        L = None
        for jitter in (0.0, 1e-11, 1e-8):
            try:
                L = _chol_factor(H + jitter * np.eye(n) if jitter else H)
                break
            except np.linalg.LinAlgError:
                continue
        if L is None:
            return finish(z, lam, nu, iters, status=QpStatus.MAX_ITER)

        if m_eq:
            HiAT = _chol_solve(L, problem.A.T)
            F = problem.A @ HiAT
            try:
                LF = _chol_factor(F + 1e-14 * np.trace(F) / max(m_eq, 1) * np.eye(m_eq))
            except np.linalg.LinAlgError:
                return finish(z, lam, nu, iters, status=QpStatus.MAX_ITER)

        def kkt_solve(v_dual, v_in, v_cent, v_eq):
            # Eliminate (s, lam), then the equality block via the Schur complement.
            r2 = v_cent / s - d * v_in
            p1 = -v_dual + problem.G.T @ r2
            if m_eq:
                t1 = _chol_solve(L, p1)
                dnu = _chol_solve(LF, problem.A @ t1 + v_eq)
                dz = _chol_solve(L, p1 - problem.A.T @ dnu)
            else:
                dnu = np.zeros(0)
                dz = _chol_solve(L, p1)
            ds = -v_in - problem.G @ dz
            dlam = -(v_cent + lam * ds) / s
            return dz, ds, dlam, dnu

        # Affine (predictor) direction.
        dz_a, ds_a, dlam_a, dnu_a = kkt_solve(r_dual, r_in, s * lam, r_eq)
        alpha_aff = min(_max_step(s, ds_a), _max_step(lam, dlam_a))
        mu_aff = float((s + alpha_aff * ds_a) @ (lam + alpha_aff * dlam_a)) / m_in
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0

        # Corrector with Mehrotra centering.
        cent = s * lam + ds_a * dlam_a - sigma * mu
        dz, ds, dlam, dnu = kkt_solve(r_dual, r_in, cent, r_eq)
        alpha = 0.99 * min(_max_step(s, ds), _max_step(lam, dlam))
        z = z + alpha * dz
        s = s + alpha * ds
        lam = lam + alpha * dlam
        if m_eq:
            nu = nu + alpha * dnu

    return finish(z, lam, nu, iters, status=None)


def _kkt_residuals(Qr, problem, z, lam, nu):
    r = Qr @ z + problem.q
    if problem.n_eq:
        r = r + problem.A.T @ nu
    if problem.n_in:
        r = r + problem.G.T @ lam
    rs = float(np.abs(r).max(initial=0.0))
    rf = float(np.abs(problem.A @ z - problem.b).max(initial=0.0)) if problem.n_eq else 0.0
    if problem.n_in:
        slack = problem.G @ z - problem.h
        rf = max(rf, float(np.maximum(slack, 0.0).max(initial=0.0)))
        rc = float(np.abs(lam * slack).max(initial=0.0))
        rc = max(rc, float(np.maximum(-lam, 0.0).max(initial=0.0)))
    else:
        rc = 0.0
    return rs, rf, rc


def _initial_point(Qr, problem, warm_start):
    n, m_eq, m_in = problem.n, problem.n_eq, problem.n_in
    if (
        warm_start is not None
        and warm_start.z.shape == (n,)
        and warm_start.lam.shape == (m_in,)
        and warm_start.nu.shape == (m_eq,)
    ):
        z = warm_start.z.copy()
        slack = problem.h - problem.G @ z
        s = np.maximum(slack, 1e-2)
        lam = np.clip(warm_start.lam, 1e-2, 1e6)
        nu = warm_start.nu.copy()
        return z, s, lam, nu

    H = Qr + problem.G.T @ problem.G
    try:
        L = _chol_factor(H)
    except np.linalg.LinAlgError:
        L = _chol_factor(H + (1e-8 + 1e-12 * np.trace(H)) * np.eye(n))
    r1 = -problem.q + problem.G.T @ problem.h
    if m_eq:
        HiAT = _chol_solve(L, problem.A.T)
        F = problem.A @ HiAT
        LF = _chol_factor(F + 1e-14 * np.trace(F) / max(m_eq, 1) * np.eye(m_eq))
        nu = _chol_solve(LF, problem.A @ _chol_solve(L, r1) - problem.b)
        z = _chol_solve(L, r1 - problem.A.T @ nu)
    else:
        nu = np.zeros(0)
        z = _chol_solve(L, r1)
    resid = problem.G @ z - problem.h
    shift_p = float((-resid).min(initial=0.0))
    s = -resid if shift_p >= 0 else -resid + (1.0 + abs(shift_p))
    shift_d = float(resid.min(initial=0.0))
    lam = resid + (1.0 + abs(shift_d)) if shift_d < 0 else resid
    lam = np.maximum(lam, 1e-8)
    s = np.maximum(s, 1e-8)
    return z, s, lam, nu


# ---------------------------------------------------------------------------
# Sensitivities


def _sensitivity_kkt_matrix(problem: QpProblem, solution: QpSolution) -> sp.csc_matrix:
    n, m_eq, m_in = problem.n, problem.n_eq, problem.n_in
    Qr = problem.Q + solution.regularization * np.eye(n)
    slack_diag = problem.G @ solution.z - problem.h if m_in else np.zeros(0)
    rows = [
        [sp.csr_matrix(Qr), sp.csr_matrix(problem.G.T), sp.csr_matrix(problem.A.T)],
        [
            sp.csr_matrix(solution.lam[:, None] * problem.G),
            sp.diags(slack_diag, format="csr"),
            sp.csr_matrix((m_in, m_eq)),
        ],
        [sp.csr_matrix(problem.A), sp.csr_matrix((m_eq, m_in)), sp.csr_matrix((m_eq, m_eq))],
    ]
    return sp.bmat(rows, format="csc")


def degenerate_rows(problem: QpProblem, solution: QpSolution, strict_tol: float = STRICT_TOL):
    """Inequality rows where both the multiplier and the slack vanish."""
    if problem.n_in == 0:
        return np.zeros(0, dtype=int)
    slack = problem.h - problem.G @ solution.z
    return np.flatnonzero((np.abs(solution.lam) <= strict_tol) & (np.abs(slack) <= strict_tol))


def differentiate_cost(
    problem: QpProblem,
    solution: QpSolution,
    jacobians: ParamJacobians,
    minimizer_jacobian: bool = False,
    shift_degenerate: bool = False,
    strict_tol: float = STRICT_TOL,
) -> SensitivityResult:
    """Gradient of the optimal cost w.r.t. parameters via the KKT system.

    The sensitivity matrix is factored once (sparse LU) and reused for
    every parameter.  Strict-complementarity failures raise
    DegenerateError unless ``shift_degenerate`` is set, in which case the
    offending rows of h are nudged outward and the QP re-solved once.
    """
    if solution.status is not QpStatus.OPTIMAL:
        raise ValueError(f"cannot differentiate a solution with status {solution.status}")
    jacobians.check_shapes(problem)

    degen = degenerate_rows(problem, solution, strict_tol)
    reported = []
    if degen.size:
        if not shift_degenerate:
            raise DegenerateError(degen)
        h2 = problem.h.copy()
        h2[degen] += 1e-9
        problem = QpProblem(problem.Q, problem.q, problem.A, problem.b, problem.G, h2)
        solution = solve_qp(problem, warm_start=solution)
        if solution.status is not QpStatus.OPTIMAL:
            raise DegenerateError(degen, "degenerate shift re-solve failed")
        # The shift moves the boundary by 1e-9, so recheck at machine level.
        still = degenerate_rows(problem, solution, 1e-12)
        if still.size:
            raise DegenerateError(still, "degeneracy persists after shift")
        reported = degen.tolist()

    n, m_eq, m_in = problem.n, problem.n_eq, problem.n_in
    z, lam, nu = solution.z, solution.lam, solution.nu
    K = _sensitivity_kkt_matrix(problem, solution)
    try:
        lu = splu(K)
    except RuntimeError as exc:
        raise SingularKktError(str(exc)) from exc

    dim = K.shape[0]
    if dim <= 64:
        cond = np.linalg.cond(K.toarray(), 1)
        rcond = 0.0 if not np.isfinite(cond) else 1.0 / cond
    else:
        inv_op = LinearOperator((dim, dim), matvec=lu.solve, rmatvec=lambda v: lu.solve(v, trans="T"))
        rcond = 1.0 / (onenormest(K) * onenormest(inv_op))

    Qr = problem.Q + solution.regularization * np.eye(n)
    grad_z = Qr @ z + problem.q
    count = jacobians.count
    grad = np.zeros(count)
    dz_all = np.zeros((n, count)) if minimizer_jacobian else None

    for m in range(count):
        dQ, dq = jacobians.dQ[m], jacobians.dq[m]
        dA, db = jacobians.dA[m], jacobians.db[m]
        dG, dh = jacobians.dG[m], jacobians.dh[m]

        r1 = np.zeros(n)
        if dQ is not None:
            r1 += dQ @ z
        if dq is not None:
            r1 += dq
        if dG is not None:
            r1 += dG.T @ lam
        if dA is not None:
            r1 += dA.T @ nu
        r2 = np.zeros(m_in)
        if dG is not None:
            r2 += lam * (dG @ z)
        if dh is not None:
            r2 -= lam * dh
        r3 = np.zeros(m_eq)
        if dA is not None:
            r3 += dA @ z
        if db is not None:
            r3 -= db

        rhs = np.concatenate([r1, r2, r3])
        if not rhs.any():
            continue
        step = -lu.solve(rhs)
        if not np.isfinite(step).all():
            raise SingularKktError("sensitivity solve produced non-finite values")
        dz = step[:n]
        val = float(grad_z @ dz)
        if dQ is not None:
            val += 0.5 * float(z @ (dQ @ z))
        if dq is not None:
            val += float(dq @ z)
        grad[m] = val
        if dz_all is not None:
            dz_all[:, m] = dz

    return SensitivityResult(grad=grad, dz=dz_all, conditioning=rcond, degenerate_indices=reported)


def objective_data_gradients(problem: QpProblem, solution: QpSolution) -> dict:
    """Gradients of the optimal cost w.r.t. each data block.

    These follow from stationarity of the Lagrangian at the solution:
    moving any block entry changes the optimal cost by the corresponding
    Lagrangian partial, so no linear solve is required.
    """
    z, lam, nu = solution.z, solution.lam, solution.nu
    return {
        "Q": 0.5 * np.outer(z, z),
        "q": z.copy(),
        "A": np.outer(nu, z),
        "b": -nu.copy(),
        "G": np.outer(lam, z),
        "h": -lam.copy(),
    }


def multiplier_cost_gradient(
    problem: QpProblem,
    solution: QpSolution,
    jacobians: ParamJacobians,
    check_degenerate: bool = True,
    strict_tol: float = STRICT_TOL,
) -> np.ndarray:
    """Gradient of the optimal cost contracted from the multiplier form.

    Element-wise products of the data-block gradients with the parameter
    Jacobians; equal to differentiate_cost on non-degenerate problems but
    cheaper when the Jacobians are sparse.
    """
    if solution.status is not QpStatus.OPTIMAL:
        raise ValueError(f"cannot differentiate a solution with status {solution.status}")
    if check_degenerate:
        degen = degenerate_rows(problem, solution, strict_tol)
        if degen.size:
            raise DegenerateError(degen)
    z, lam, nu = solution.z, solution.lam, solution.nu
    grad = np.zeros(jacobians.count)
    for m in range(jacobians.count):
        val = 0.0
        dQ = jacobians.dQ[m]
        if dQ is not None:
            val += 0.5 * float(z @ (dQ @ z))
        dq = jacobians.dq[m]
        if dq is not None:
            val += float(dq @ z)
        dA = jacobians.dA[m]
        if dA is not None:
            val += float(nu @ (dA @ z))
        db = jacobians.db[m]
        if db is not None:
            val -= float(nu @ db)
        dG = jacobians.dG[m]
        if dG is not None:
            val += float(lam @ (dG @ z))
        dh = jacobians.dh[m]
        if dh is not None:
            val -= float(lam @ dh)
        grad[m] = val
    return grad


# ---------------------------------------------------------------------------
# Linear programming


@dataclass(frozen=True)
class LinearPolytope:
    """Constraint set  A_ineq p <= b_ineq,  A_eq p = b_eq."""

    A_ineq: np.ndarray
    b_ineq: np.ndarray
    A_eq: Optional[np.ndarray] = None
    b_eq: Optional[np.ndarray] = None

    def blocks(self, dim: int):
        a_in = self.A_ineq if self.A_ineq.size else np.zeros((0, dim))
        a_eq = self.A_eq if self.A_eq is not None else np.zeros((0, dim))
        b_eq = self.b_eq if self.b_eq is not None else np.zeros(0)
        return a_in, self.b_ineq, a_eq, b_eq


def solve_lp(objective: np.ndarray, polytope: LinearPolytope, gap_tol: float = 1e-8) -> np.ndarray:
    """Minimize objective'p over the polytope.

    Ties between optimal vertices are broken deterministically by taking
    the minimum-Euclidean-norm optimal point: a first solve with a tiny
    quadratic perturbation locates the optimal value, then a second solve
    minimizes ||p||^2 subject to near-optimality of the first value.
    Raises LpInfeasibleError / LpUnboundedError accordingly.
    """
    c = np.asarray(objective, dtype=float)
    n = c.shape[0]
    a_in, b_in, a_eq, b_eq = polytope.blocks(n)

    def run(Qmat, qvec, Gm, hv):
        prob = QpProblem(Q=Qmat, q=qvec, A=a_eq, b=b_eq, G=Gm, h=hv)
        sol = solve_qp(prob, tol=gap_tol)
        if sol.status is QpStatus.INFEASIBLE:
            raise LpInfeasibleError("linear program infeasible")
        if sol.status is not QpStatus.OPTIMAL:
            raise SolverFailure(f"LP solve ended with status {sol.status}")
        return sol

    if float(np.abs(c).max(initial=0.0)) > 0.0:
        sol1 = run(LP_CURVATURE * np.eye(n), c, a_in, b_in)
        p1 = sol1.z
        if float(np.abs(p1).max(initial=0.0)) > 1e6 and _lp_unbounded(c, a_in, a_eq, gap_tol):
            raise LpUnboundedError("objective unbounded over the polytope")
        v1 = float(c @ p1)
        guard = v1 + max(1e-9, 1e-9 * abs(v1))
        Gm = np.vstack([a_in, c[None, :]])
        hv = np.concatenate([b_in, [guard]])
    else:
        Gm, hv = a_in, b_in
    sol2 = run(np.eye(n), np.zeros(n), Gm, hv)
    return sol2.z


def _lp_unbounded(c, a_in, a_eq, gap_tol) -> bool:
    """Check for a recession direction d with c'd < 0 (normalized box)."""
    n = c.shape[0]
    box = np.vstack([np.eye(n), -np.eye(n)])
    rows = np.vstack([a_in, box]) if a_in.size else box
    rhs = np.concatenate([np.zeros(a_in.shape[0]), np.ones(2 * n)])
    poly = LinearPolytope(rows, rhs, a_eq if a_eq.size else None, np.zeros(a_eq.shape[0]) if a_eq.size else None)
    prob = QpProblem(
        Q=LP_CURVATURE * np.eye(n),
        q=c,
        A=poly.A_eq if poly.A_eq is not None else np.zeros((0, n)),
        b=poly.b_eq if poly.b_eq is not None else np.zeros(0),
        G=rows,
        h=rhs,
    )
    sol = solve_qp(prob, tol=gap_tol)
    return sol.status is QpStatus.OPTIMAL and float(c @ sol.z) < -1e-6
