"""Minimal timing-parameterized MPC on a scalar double integrator.

The control input over the horizon is a two-segment Hermite spline whose
switch time is the single high-level parameter.  The problem is small
enough that the optimal cost admits an exact non-iterative evaluation
(dense KKT solve with the input bounds verified inactive), giving an
independent reference gradient via high-order finite differences.  Used
to exercise the full high-level stack end to end.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .bilevel import BilevelConfig, barrier_terms
from .errors import PolytopeViolationError, SolverFailure
from .qp import (
    ParamJacobians,
    QpProblem,
    QpStatus,
    multiplier_cost_gradient,
    solve_qp,
)
from .spline import hermite_rate_weights, hermite_weight_duration_grads, hermite_weights

import scipy.sparse as sp


@dataclass(frozen=True)
class ToyConfig:
    horizon: float = 1.0
    num_nodes: int = 11
    w_pos: float = 20.0
    w_vel: float = 1.0
    w_u: float = 0.02
    w_ridge: float = 1e-9
    terminal_scale: float = 4.0
    u_max: float = 100.0
    switch_margin: float = 0.1  # keep the switch this far from both ends

    @property
    def dt(self) -> float:
        return self.horizon / (self.num_nodes - 1)


@dataclass(frozen=True)
class ScalarTiming:
    """One switch time in a box; mirrors the schedule's polytope API."""

    theta: float
    lo: float
    hi: float

    def free_entries(self):
        return [(0, 0)]

    def theta_free(self) -> np.ndarray:
        return np.array([self.theta])

    def polytope_rows(self):
        return np.array([[-1.0], [1.0]]), np.array([-self.lo, self.hi])

    def polytope_residual(self) -> float:
        A, b = self.polytope_rows()
        return float((b - A @ self.theta_free()).min())

    def apply_step(self, p: np.ndarray) -> "ScalarTiming":
        out = replace(self, theta=self.theta + float(p[0]))
        if out.polytope_residual() < -1e-9:
            raise PolytopeViolationError("switch time left its box")
        return out


def _input_weights(cfg: ToyConfig, theta: float, t: float):
    """Weights of u(t) over [u0, ud0, um, udm, u1, ud1] and their theta grads."""
    T = cfg.horizon
    w = np.zeros(6)
    dw = np.zeros(6)
    if t < theta:
        ts, tau, sl = theta, t, slice(0, 4)
        w[sl] = hermite_weights(tau, ts)
        dw[sl] = hermite_weight_duration_grads(tau, ts)
    else:
        ts, tau, sl = T - theta, t - theta, slice(2, 6)
        w[sl] = hermite_weights(tau, ts)
        dw[sl] = -hermite_weight_duration_grads(tau, ts) - hermite_rate_weights(tau, ts)
    return w, dw


def build_toy_qp(cfg: ToyConfig, theta: float, x0: np.ndarray):
    """QP over [p_i, v_i, u-nodes] plus the analytic switch-time Jacobians."""
    N = cfg.num_nodes
    dt = cfg.dt
    n = 2 * N + 6
    uoff = 2 * N
    Q = np.zeros((n, n))
    q = np.zeros(n)
    n_eq = 2 + 2 * (N - 1)
    A = np.zeros((n_eq, n))
    b = np.zeros(n_eq)
    G = np.zeros((2 * N, n))
    h = np.full(2 * N, cfg.u_max)
    dQ = np.zeros((n, n))
    dA = np.zeros((n_eq, n))
    dG = np.zeros((2 * N, n))

    A[0, 0] = 1.0
    A[1, 1] = 1.0
    b[0:2] = x0
    for i in range(N):
        t = i * dt
        w, dw = _input_weights(cfg, theta, t)
        scale = cfg.terminal_scale if i == N - 1 else 1.0
        Q[2 * i, 2 * i] += scale * cfg.w_pos
        Q[2 * i + 1, 2 * i + 1] += scale * cfg.w_vel
        Q[uoff:, uoff:] += cfg.w_u * np.outer(w, w)
        dQ[uoff:, uoff:] += cfg.w_u * (np.outer(dw, w) + np.outer(w, dw))
        G[2 * i, uoff:] = w
        G[2 * i + 1, uoff:] = -w
        dG[2 * i, uoff:] = dw
        dG[2 * i + 1, uoff:] = -dw
        if i < N - 1:
            r = 2 + 2 * i
            A[r, 2 * i + 2] = 1.0
            A[r, 2 * i] = -1.0
            A[r, 2 * i + 1] = -dt
            A[r + 1, 2 * i + 3] = 1.0
            A[r + 1, 2 * i + 1] = -1.0
            A[r + 1, uoff:] = -dt * w
            dA[r + 1, uoff:] = -dt * dw
    Q[uoff:, uoff:] += cfg.w_ridge * np.eye(6)

    problem = QpProblem(Q=Q, q=q, A=A, b=b, G=G, h=h)
    jac = ParamJacobians(
        dQ=[sp.csr_matrix(dQ)],
        dq=[None],
        dA=[sp.csr_matrix(dA)],
        db=[None],
        dG=[sp.csr_matrix(dG)],
        dh=[None],
    )
    return problem, jac


def exact_cost(cfg: ToyConfig, theta: float, x0: np.ndarray) -> float:
    """Optimal cost by a single dense KKT solve, bounds verified inactive."""
    problem, _ = build_toy_qp(cfg, theta, x0)
    n, m = problem.n, problem.n_eq
    K = np.zeros((n + m, n + m))
    K[:n, :n] = problem.Q
    K[:n, n:] = problem.A.T
    K[n:, :n] = problem.A
    rhs = np.concatenate([-problem.q, problem.b])
    z = np.linalg.solve(K, rhs)[:n]
    slack = problem.h - problem.G @ z
    if slack.min() <= 1e-6:
        raise SolverFailure("input bound active; exact equality solve invalid")
    return problem.objective(z)


def reference_gradient(cfg: ToyConfig, theta: float, x0: np.ndarray, h: float = 1e-4) -> float:
    """Five-point finite-difference derivative of the exact cost."""
    j = lambda th: exact_cost(cfg, th, x0)
    return (-j(theta + 2 * h) + 8 * j(theta + h) - 8 * j(theta - h) + j(theta - 2 * h)) / (12 * h)


class DoubleIntegratorContext:
    """Plant + controller context for the high-level loop."""

    def __init__(
        self,
        cfg: ToyConfig,
        bcfg: Optional[BilevelConfig],
        theta0: float = 0.37,
        x0=(1.0, 0.0),
        log_reference: bool = True,
    ):
        self.cfg = cfg
        self.bcfg = bcfg
        self.state = np.asarray(x0, dtype=float)
        self.timing = ScalarTiming(theta0, cfg.switch_margin, cfg.horizon - cfg.switch_margin)
        self.problem = None
        self.sol = None
        self.u_nodes = np.zeros(6)
        self.log_reference = log_reference
        self.gradient_log = []  # (|grad|, <grad, grad_ref>, grad_ref)
        self.trace = []

    # -- protocol ----------------------------------------------------------

    @property
    def schedule(self):
        return self.timing

    def warmup(self, k: int):
        for _ in range(k):
            self.controller_step()

    def _solve(self, timing: ScalarTiming):
        problem, jac = build_toy_qp(self.cfg, timing.theta, self.state)
        sol = solve_qp(problem)
        if sol.status is not QpStatus.OPTIMAL:
            raise SolverFailure(f"toy QP ended with {sol.status}")
        return problem, jac, sol

    def controller_step(self) -> float:
        self.problem, self._jac, self.sol = self._solve(self.timing)
        self.u_nodes = self.sol.z[2 * self.cfg.num_nodes :].copy()
        return self.sol.obj

    def compute_gradient(self) -> np.ndarray:
        grad = multiplier_cost_gradient(self.problem, self.sol, self._jac)
        if self.bcfg is not None and self.bcfg.barrier_enabled:
            _, bgrad = barrier_terms(self.timing, self.bcfg.barrier_weight)
            grad = grad + bgrad
        if self.log_reference:
            ref = reference_gradient(self.cfg, self.timing.theta, self.state)
            self.gradient_log.append(
                (float(np.abs(grad[0])), float(grad[0] * ref), float(ref))
            )
        return grad

    def candidate_cost(self, timing: ScalarTiming):
        problem, jac, sol = self._solve(timing)
        return sol.obj, (problem, jac, sol)

    def adopt(self, step):
        self.timing = step.schedule
        if step.payload is not None:
            self.problem, self._jac, self.sol = step.payload
            self.u_nodes = self.sol.z[2 * self.cfg.num_nodes :].copy()

    def release_appended(self):
        pass

    def finish_cycle(self, rec):
        rec["state"] = self.state.copy()
        rec["theta"] = self.timing.theta
        rec["polytope_residual"] = self.timing.polytope_residual()
        self.trace.append(rec)

    def input_at(self, t: float) -> float:
        w, _ = _input_weights(self.cfg, self.timing.theta, min(t, self.cfg.horizon))
        return float(w @ self.u_nodes)

    def plant_step(self, substeps: int = 20):
        """Integrate the double integrator under the planned input spline."""
        h = self.cfg.dt / substeps
        p, v = self.state
        for k in range(substeps):
            t = k * h

            def acc(tq):
                return self.input_at(tq)

            k1v = acc(t)
            k1p = v
            k2v = acc(t + h / 2)
            k2p = v + h / 2 * k1v
            k3v = acc(t + h / 2)
            k3p = v + h / 2 * k2v
            k4v = acc(t + h)
            k4p = v + h * k3v
            p += h / 6 * (k1p + 2 * k2p + 2 * k3p + k4p)
            v += h / 6 * (k1v + 2 * k2v + 2 * k3v + k4v)
        self.state = np.array([p, v])
