"""Single-rigid-body quadruped dynamics on a 12-dim tangent space.

State: center of mass r, linear momentum l, unit quaternion orientation,
and the angular-momentum product (inertia times angular velocity).
Tangent coordinates are ordered [dr, dl, dxi, dam]; orientation
increments apply on the right, quat * exp(delta/2).  Forces act at
massless foot points, so the torque about the CoM is sum (e_i - r) x F_i
with no contact dynamics.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

TANGENT_DIM = 12
QUAT_NORM_TOL = 1e-10


# --- quaternion helpers (w, x, y, z convention) ---------------------------


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_from_tangent(delta: np.ndarray) -> np.ndarray:
    """exp(delta / 2) for a rotation-vector increment delta."""
    half = 0.5 * np.asarray(delta, dtype=float)
    angle = float(np.linalg.norm(half))
    if angle < 1e-12:
        q = np.concatenate([[1.0], half])
    else:
        q = np.concatenate([[np.cos(angle)], np.sin(angle) / angle * half])
    return q / np.linalg.norm(q)


def quat_to_tangent(q: np.ndarray) -> np.ndarray:
    """2 log(q): rotation vector of a unit quaternion (shortest arc)."""
    if q[0] < 0.0:
        q = -q
    vec = q[1:]
    norm = float(np.linalg.norm(vec))
    if norm < 1e-12:
        return 2.0 * vec / max(q[0], 1e-300)
    angle = np.arctan2(norm, q[0])
    return 2.0 * angle * vec / norm


def quat_box_minus(qa: np.ndarray, qb: np.ndarray) -> np.ndarray:
    """Tangent delta with qa = qb * exp(delta / 2)."""
    return quat_to_tangent(quat_mul(quat_conj(qb), qa))


def skew(v: np.ndarray) -> np.ndarray:
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


# --- domain types ----------------------------------------------------------


def _default_inertia():
    return np.diag([0.07, 0.26, 0.24])


def _default_gravity():
    return np.array([0.0, 0.0, 9.81])


def _default_leg_offsets():
    # FL, FR, RL, RR shoulder projections in the body-level frame.
    return np.array([[0.19, 0.11], [0.19, -0.11], [-0.19, 0.11], [-0.19, -0.11]])


@dataclass(frozen=True)
class SrbParams:
    mass: float = 13.0
    inertia: np.ndarray = field(default_factory=_default_inertia)
    gravity: np.ndarray = field(default_factory=_default_gravity)
    n_legs: int = 4
    mu: float = 0.7
    f_max: float = 250.0
    leg_offsets: np.ndarray = field(default_factory=_default_leg_offsets)
    box_half: np.ndarray = field(default_factory=lambda: np.array([0.15, 0.10]))

    def __post_init__(self):
        if self.mass <= 0 or self.mu <= 0 or self.f_max <= 0:
            raise ValueError("mass, mu and f_max must be positive")
        sym = np.abs(self.inertia - self.inertia.T).max()
        if sym > 1e-12 or np.linalg.eigvalsh(self.inertia).min() <= 0:
            raise ValueError("inertia must be symmetric positive definite")

    @property
    def inertia_inv(self) -> np.ndarray:
        return np.linalg.inv(self.inertia)


@dataclass(frozen=True)
class SrbState:
    r: np.ndarray
    l: np.ndarray
    quat: np.ndarray
    ang_mom: np.ndarray  # inertia times angular velocity

    def __post_init__(self):
        norm = float(np.linalg.norm(self.quat))
        if abs(norm - 1.0) > QUAT_NORM_TOL:
            raise ValueError(f"quaternion norm {norm} deviates from 1")

    @staticmethod
    def resting(r=(0.0, 0.0, 0.3)) -> "SrbState":
        return SrbState(
            r=np.asarray(r, dtype=float),
            l=np.zeros(3),
            quat=np.array([1.0, 0.0, 0.0, 0.0]),
            ang_mom=np.zeros(3),
        )


@dataclass(frozen=True)
class SrbInput:
    forces: np.ndarray  # (n_legs, 3)
    feet: np.ndarray  # (n_legs, 3) world-frame foot points


def apply_tangent(state: SrbState, delta: np.ndarray) -> SrbState:
    d = np.asarray(delta, dtype=float)
    quat = quat_mul(state.quat, quat_from_tangent(d[6:9]))
    return SrbState(
        r=state.r + d[0:3],
        l=state.l + d[3:6],
        quat=quat / np.linalg.norm(quat),
        ang_mom=state.ang_mom + d[9:12],
    )


def state_difference(a: SrbState, b: SrbState) -> np.ndarray:
    """Tangent delta with a = apply_tangent(b, delta)."""
    return np.concatenate(
        [a.r - b.r, a.l - b.l, quat_box_minus(a.quat, b.quat), a.ang_mom - b.ang_mom]
    )


def dynamics(state: SrbState, inp: SrbInput, params: SrbParams) -> np.ndarray:
    """Tangent-space state derivative [dr, dl, zeta, d(ang_mom)]."""
    zeta = params.inertia_inv @ state.ang_mom
    dl = inp.forces.sum(axis=0) - params.mass * params.gravity
    torque = -np.cross(zeta, state.ang_mom)
    for i in range(params.n_legs):
        torque = torque + np.cross(inp.feet[i] - state.r, inp.forces[i])
    return np.concatenate([state.l / params.mass, dl, zeta, torque])


def linearize(state: SrbState, inp: SrbInput, params: SrbParams):
    """Continuous-time Jacobians (A_c, B_c) of dynamics on the tangent.

    Input columns are [F_0..F_k, e_0..e_k] with 3 components each.
    """
    n = params.n_legs
    A = np.zeros((TANGENT_DIM, TANGENT_DIM))
    A[0:3, 3:6] = np.eye(3) / params.mass
    A[6:9, 9:12] = params.inertia_inv
    A[9:12, 9:12] = skew(state.ang_mom) @ params.inertia_inv - skew(
        params.inertia_inv @ state.ang_mom
    )
    A[9:12, 0:3] = sum(skew(inp.forces[i]) for i in range(n))

    B = np.zeros((TANGENT_DIM, 6 * n))
    for i in range(n):
        B[3:6, 3 * i : 3 * i + 3] = np.eye(3)
        B[9:12, 3 * i : 3 * i + 3] = skew(inp.feet[i] - state.r)
        B[9:12, 3 * (n + i) : 3 * (n + i) + 3] = -skew(inp.forces[i])
    return A, B


def euler_step(state: SrbState, inp: SrbInput, params: SrbParams, dt: float) -> SrbState:
    """Forward-Euler discrete model used by the MPC linearization."""
    return apply_tangent(state, dt * dynamics(state, inp, params))


def integrate(
    state: SrbState,
    input_provider: Callable[[float], SrbInput],
    params: SrbParams,
    dt: float,
    t0: float = 0.0,
) -> SrbState:
    """One RK4 step over [t0, t0 + dt] with tangent retraction per stage."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    u0 = input_provider(t0)
    um = input_provider(t0 + 0.5 * dt)
    u1 = input_provider(t0 + dt)
    k1 = dynamics(state, u0, params)
    k2 = dynamics(apply_tangent(state, 0.5 * dt * k1), um, params)
    k3 = dynamics(apply_tangent(state, 0.5 * dt * k2), um, params)
    k4 = dynamics(apply_tangent(state, dt * k3), u1, params)
    return apply_tangent(state, dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
