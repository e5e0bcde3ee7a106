"""High-level optimization of contact times around the low-level MPC.

Each high-level step contracts the QP-value gradient with the analytic
block derivatives over the free contact times (optionally adding a
log-barrier on the timing polytope), solves a small LP inside the
polytope plus a trust-region box for the step direction, and picks the
step length by evaluating the MPC cost on a fixed grid of fractions in
parallel.  A steady loop interleaves these steps with plain warm-started
MPC cycles at a configurable period.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import BarrierDomainError, DegenerateError, GaitoptError, LpInfeasibleError
from .qp import LinearPolytope, ParamJacobians, multiplier_cost_gradient, solve_lp

ACCEPT_TOL = 1e-12


def _default_alphas():
    return tuple(np.linspace(0.1, 1.0, 10))


@dataclass(frozen=True)
class BilevelConfig:
    hl_period: int = 5  # timing update every this many MPC cycles
    warmup_solves: int = 3  # MPC iterations before the loop starts
    alphas: tuple = field(default_factory=_default_alphas)
    n_solves_eval: int = 1
    trust_radius: float = 0.05
    barrier_enabled: bool = False
    barrier_weight: float = 1e-3
    c1: float = 1e-4
    c2: float = 0.9
    line_search_workers: int = 1

    def __post_init__(self):
        if self.hl_period < 1 or self.warmup_solves <= 0 or self.trust_radius <= 0:
            raise ValueError("hl_period >= 1, warmup_solves > 0, trust_radius > 0 required")
        if not all(0.0 < a <= 1.0 for a in self.alphas):
            raise ValueError("line-search fractions must lie in (0, 1]")
        if not 0.0 < self.c1 < self.c2 < 1.0:
            raise ValueError("need 0 < c1 < c2 < 1")


@dataclass
class HighLevelStep:
    grad: np.ndarray
    p: np.ndarray
    alpha_star: float
    costs: dict
    baseline_cost: float
    accepted: bool
    wolfe_armijo_ok: bool
    schedule: object = None
    payload: object = None
    error: Optional[str] = None


def barrier_terms(sched, weight: float):
    """Value and gradient of the log barrier over the polytope rows."""
    A, b = sched.polytope_rows()
    if b.size == 0:
        n = len(sched.theta_free())
        return 0.0, np.zeros(n)
    g = b - A @ sched.theta_free()
    if np.any(g <= 0.0):
        bad = np.flatnonzero(g <= 0.0).tolist()
        raise BarrierDomainError(f"barrier rows {bad} have non-positive slack")
    value = -float(np.sum(np.log(g)))
    grad = A.T @ (1.0 / g)
    return weight * value, weight * grad


def assemble_gradient(
    iterate,
    jac: ParamJacobians,
    sched,
    cfg: BilevelConfig,
    cost_const_grad: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Gradient of the evaluated cost w.r.t. the free contact times.

    Contracts the QP-value data gradients with the block derivatives and
    adds the guess-residual constant's derivative so the result matches
    the quantity the line search actually compares.
    """
    grad = multiplier_cost_gradient(iterate.qp, iterate.sol, jac)
    if cost_const_grad is not None:
        grad = grad + cost_const_grad
    if cfg.barrier_enabled:
        _, bgrad = barrier_terms(sched, cfg.barrier_weight)
        grad = grad + bgrad
    return grad


def step_direction(grad: np.ndarray, sched, cfg: BilevelConfig) -> np.ndarray:
    """LP step inside the timing polytope with a trust-region box."""
    n = grad.shape[0]
    if n == 0:
        return np.zeros(0)
    if not np.isfinite(grad).all():
        raise ValueError("gradient has non-finite entries")
    A, b = sched.polytope_rows()
    theta = sched.theta_free()
    slack = b - A @ theta if b.size else np.zeros(0)
    if slack.size and slack.min() < -1e-9:
        raise LpInfeasibleError("current timings violate their polytope")
    box = np.vstack([np.eye(n), -np.eye(n)])
    box_rhs = np.full(2 * n, cfg.trust_radius)
    rows = np.vstack([A, box]) if b.size else box
    rhs = np.concatenate([np.maximum(slack, 0.0), box_rhs])
    return solve_lp(grad, LinearPolytope(rows, rhs))


def line_search(
    sched,
    p: np.ndarray,
    grad: np.ndarray,
    cfg: BilevelConfig,
    evaluate: Callable,
    baseline_cost: float,
    baseline_payload=None,
) -> HighLevelStep:
    """Grid search over step fractions; keeps the best strict improvement.

    ``evaluate(schedule) -> (cost, payload)`` must be pure; evaluations
    run concurrently when configured and the reduction is a deterministic
    argmin with the smallest fraction breaking ties.  The sufficient-
    decrease inequality is recorded as a diagnostic, not enforced.
    """
    if p.size == 0 or float(np.abs(p).max(initial=0.0)) <= 1e-12:
        return HighLevelStep(
            grad=grad,
            p=p,
            alpha_star=0.0,
            costs={},
            baseline_cost=baseline_cost,
            accepted=False,
            wolfe_armijo_ok=False,
            schedule=sched,
            payload=baseline_payload,
        )

    candidates = [(alpha, sched.apply_step(alpha * p)) for alpha in cfg.alphas]

    def run(item):
        alpha, cand = item
        try:
            cost, payload = evaluate(cand)
            return alpha, cand, float(cost), payload, None
        except GaitoptError as exc:
            return alpha, cand, np.inf, None, str(exc)

    if cfg.line_search_workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.line_search_workers) as pool:
            results = list(pool.map(run, candidates))
    else:
        results = [run(item) for item in candidates]

    costs = {alpha: cost for alpha, _, cost, _, _ in results}
    best = None
    for alpha, cand, cost, payload, err in results:
        if err is not None:
            continue
        if best is None or cost < best[2]:
            best = (alpha, cand, cost, payload)

    if best is None:
        return HighLevelStep(
            grad=grad,
            p=p,
            alpha_star=0.0,
            costs=costs,
            baseline_cost=baseline_cost,
            accepted=False,
            wolfe_armijo_ok=False,
            schedule=sched,
            payload=baseline_payload,
            error="all line-search evaluations failed",
        )

    alpha_star, cand, best_cost, payload = best
    accepted = (baseline_cost - best_cost) > ACCEPT_TOL
    slope = float(grad @ p)
    armijo_ok = best_cost <= baseline_cost + cfg.c1 * alpha_star * slope + 1e-12
    if not accepted:
        return HighLevelStep(
            grad=grad,
            p=p,
            alpha_star=alpha_star,
            costs=costs,
            baseline_cost=baseline_cost,
            accepted=False,
            wolfe_armijo_ok=armijo_ok,
            schedule=sched,
            payload=baseline_payload,
        )
    return HighLevelStep(
        grad=grad,
        p=p,
        alpha_star=alpha_star,
        costs=costs,
        baseline_cost=baseline_cost,
        accepted=True,
        wolfe_armijo_ok=armijo_ok,
        schedule=cand,
        payload=payload,
    )


def run_bilevel_loop(ctx, cfg: Optional[BilevelConfig], n_cycles: int):
    """Fixed-period loop: MPC every cycle, timing update every hl_period.

    ``ctx`` supplies the plant and controller:
      controller_step() -> cost of this cycle's warm-started MPC solve
      compute_gradient() -> gradient over free entries (DegenerateError ok)
      candidate_cost(schedule) -> (cost, payload) pure line-search probe
      adopt(step: HighLevelStep) to install an accepted schedule
      plant_step() to integrate to the next cycle
      finish_cycle(record) to attach plant state to the trace
    With cfg None the loop degenerates to plain MPC cycles.
    """
    records = []
    bilevel_on = cfg is not None
    if bilevel_on:
        ctx.warmup(cfg.warmup_solves)
    else:
        ctx.warmup(1)
    for k in range(n_cycles):
        rec = {"cycle": k, "hl": None, "timing_ms": {}}
        t0 = time.perf_counter()
        cost = ctx.controller_step()
        rec["timing_ms"]["mpc"] = 1e3 * (time.perf_counter() - t0)
        rec["cost"] = cost

        if bilevel_on and k % cfg.hl_period == 0:
            hl = {"accepted": False, "alpha": 0.0, "grad_norm": np.nan, "error": None}
            t1 = time.perf_counter()
            sched = ctx.schedule
            try:
                grad = ctx.compute_gradient()
                hl["grad_norm"] = float(np.linalg.norm(grad))
                p = step_direction(grad, sched, cfg)
                rec["timing_ms"]["gradient"] = 1e3 * (time.perf_counter() - t1)
                t2 = time.perf_counter()
                step = line_search(
                    sched, p, grad, cfg, ctx.candidate_cost, cost, baseline_payload=None
                )
                rec["timing_ms"]["line_search"] = 1e3 * (time.perf_counter() - t2)
                hl["alpha"] = step.alpha_star
                hl["accepted"] = step.accepted
                hl["p_norm"] = float(np.abs(step.p).max(initial=0.0))
                hl["armijo_ok"] = step.wolfe_armijo_ok
                hl["costs"] = step.costs
                hl["baseline"] = step.baseline_cost
                if step.error:
                    hl["error"] = step.error
                if step.accepted:
                    ctx.adopt(step)
                    rec["cost"] = min(step.costs.values())
            except (DegenerateError, BarrierDomainError, LpInfeasibleError) as exc:
                hl["error"] = f"{type(exc).__name__}: {exc}"
                if "gradient" not in rec["timing_ms"]:
                    rec["timing_ms"]["gradient"] = 1e3 * (time.perf_counter() - t1)
            rec["hl"] = hl
            ctx.release_appended()
        records.append(rec)
        ctx.finish_cycle(rec)
        if k < n_cycles - 1:
            ctx.plant_step()
    return records
