"""Receding-horizon QP construction over spline-parameterized contacts.

Decision variables are tangent-space state deviations per node plus the
endpoint values/rates of per-leg force and foot-position splines whose
segment durations come from the contact schedule.  Because node times
are fixed while contact times move spline junctions, every assembled QP
block is a smooth function of the schedule, and the builder can emit the
exact derivative of each block with respect to each free contact time.

Force phases are split into sub-segments with a free interior junction so
that stance forces can rise from and return to zero at lift-off and
touch-down; swing forces are identically zero; stance feet hold a single
planted position and swing feet bridge between neighboring holds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.sparse as sp

from . import qp as qp_mod
from .errors import DimensionMismatchError, SolverFailure
from .qp import ParamJacobians, QpProblem, QpSolution, QpStatus, solve_qp
from .schedule import ContactSchedule
from .spline import (
    hermite_rate_weights,
    hermite_weight_duration_grads,
    hermite_weights,
)
from .srb import (
    SrbInput,
    SrbParams,
    SrbState,
    apply_tangent,
    euler_step,
    linearize,
    skew,
    state_difference,
)

X_DIM = 12


def _default_vec(v):
    return field(default_factory=lambda: np.asarray(v, dtype=float))


@dataclass(frozen=True)
class MpcConfig:
    num_nodes: int = 10
    dt: float = 0.05
    w_pos: np.ndarray = _default_vec((120.0, 120.0, 300.0))
    w_lin_mom: np.ndarray = _default_vec((1.0, 1.0, 2.0))
    w_ori: np.ndarray = _default_vec((60.0, 60.0, 40.0))
    w_ang_mom: np.ndarray = _default_vec((2.0, 2.0, 2.0))
    w_force: float = 5e-5
    w_foot: float = 10.0
    w_ridge: float = 1e-7
    terminal_scale: float = 2.0
    touchdown_lock_fraction: float = 0.5
    force_subsegments: int = 2
    swing_apex: float = 0.08
    target_position: np.ndarray = _default_vec((0.0, 0.0))
    stand_height: float = 0.3

    def __post_init__(self):
        if self.num_nodes < 2 or self.dt <= 0:
            raise ValueError("need num_nodes >= 2 and dt > 0")

    @property
    def horizon(self) -> float:
        return self.num_nodes * self.dt

    def state_weights(self) -> np.ndarray:
        return np.concatenate([self.w_pos, self.w_lin_mom, self.w_ori, self.w_ang_mom])

    def target_state(self) -> SrbState:
        r = np.array([self.target_position[0], self.target_position[1], self.stand_height])
        return SrbState.resting(r)


# --- spline channel structure ----------------------------------------------

PIN = 0
VAR = 1


@dataclass
class Piece:
    """One Hermite segment of a scalar channel.

    start = phase_start + k_offset * phase_duration and
    duration = frac * phase_duration tie the piece to its owning phase.
    Slots are (tag, payload): VAR with a decision index or PIN with a value.
    """

    start: float
    duration: float
    phase_index: int
    frac: float
    k_offset: float
    slots_val: tuple
    slots_rate: tuple
    zero: bool = False


@dataclass
class Channel:
    pieces: list

    def locate(self, t: float) -> Piece:
        for piece in reversed(self.pieces):
            if t >= piece.start - 1e-12:
                return piece
        return self.pieces[0]


@dataclass
class LegStructure:
    phases: list
    force: list  # 3 channels (x, y, z)
    foot: list  # 3 channels (x, y, z)
    durations: np.ndarray
    dur_jac: np.ndarray  # (n_phases, n_free)
    dur_jac_prefix: np.ndarray  # cumulative sums over earlier phases


@dataclass
class MpcStructure:
    cfg: MpcConfig
    model: SrbParams
    t0: float
    node_times: np.ndarray
    legs: list
    var_keys: list
    n_free: int
    theta_key: tuple
    pinned_feet: dict
    locks: dict

    @property
    def n_w(self) -> int:
        return len(self.var_keys)

    @property
    def n_x(self) -> int:
        return X_DIM * self.cfg.num_nodes

    @property
    def n_z(self) -> int:
        return self.n_x + self.n_w

    def stance(self, i_node: int, leg: int) -> bool:
        t = self.node_times[i_node]
        for phase in reversed(self.legs[leg].phases):
            if t >= phase.t_start - 1e-12:
                return phase.in_contact
        return self.legs[leg].phases[0].in_contact


class _Eval:
    """Weights, constant and per-free-theta derivatives of one channel value."""

    __slots__ = ("cols", "weights", "const", "dweights", "dconst")

    def __init__(self, cols, weights, const, dweights, dconst):
        self.cols = cols
        self.weights = weights
        self.const = const
        self.dweights = dweights  # (n_free, len(cols)) or None
        self.dconst = dconst  # (n_free,) or None


def _eval_channel(channel: Channel, leg: LegStructure, t: float, derivs: bool, n_free: int) -> _Eval:
    piece = channel.locate(t)
    if piece.zero:
        if derivs:
            return _Eval([], np.zeros(0), 0.0, np.zeros((n_free, 0)), np.zeros(n_free))
        return _Eval([], np.zeros(0), 0.0, None, None)
    tau = min(max(t - piece.start, 0.0), piece.duration)
    w4 = hermite_weights(tau, piece.duration)
    slots = (
        (piece.slots_val[0], w4[0]),
        (piece.slots_rate[0], w4[1]),
        (piece.slots_val[1], w4[2]),
        (piece.slots_rate[1], w4[3]),
    )
    # Merge duplicate columns (a hold references one slot at both ends) so
    # downstream fancy-indexed accumulation stays correct.
    order, agg_w, agg_pos = [], {}, {}
    const = 0.0
    for k, ((tag, payload), w) in enumerate(slots):
        if tag == VAR:
            if payload not in agg_w:
                order.append(payload)
                agg_w[payload] = 0.0
                agg_pos[payload] = []
            agg_w[payload] += w
            agg_pos[payload].append(k)
        else:
            const += w * payload
    cols = order
    weights = [agg_w[c] for c in cols]
    if not derivs:
        return _Eval(cols, np.array(weights), const, None, None)

    rate4 = hermite_rate_weights(tau, piece.duration)
    grad4 = hermite_weight_duration_grads(tau, piece.duration)
    own4 = piece.frac * grad4 - piece.k_offset * rate4
    earlier4 = -rate4
    p = piece.phase_index
    coeff_own = leg.dur_jac[p]  # (n_free,)
    coeff_earlier = leg.dur_jac_prefix[p]
    # dW4 has shape (n_free, 4).
    dW4 = np.outer(coeff_own, own4) + np.outer(coeff_earlier, earlier4)
    dweights = np.zeros((n_free, len(cols)))
    for j, c in enumerate(cols):
        for k in agg_pos[c]:
            dweights[:, j] += dW4[:, k]
    dconst = np.zeros(n_free)
    for k, (tag, payload) in enumerate(
        (piece.slots_val[0], piece.slots_rate[0], piece.slots_val[1], piece.slots_rate[1])
    ):
        if tag == PIN and payload != 0.0:
            dconst += dW4[:, k] * payload
    return _Eval(cols, np.array(weights), const, dweights, dconst)


def _pin(v):
    return (PIN, float(v))


def build_structure(
    cfg: MpcConfig,
    model: SrbParams,
    sched: ContactSchedule,
    pinned_feet: dict,
    locks: dict,
) -> MpcStructure:
    """Lay out decision variables and spline channels for the schedule."""
    node_times = sched.t_now + cfg.dt * np.arange(cfg.num_nodes)
    var_keys = []
    var_index = {}

    def new_var(key):
        if key in var_index:
            return var_index[key]
        var_index[key] = len(var_keys)
        var_keys.append(key)
        return var_index[key]

    free = sched.free_entries()
    n_free = len(free)
    legs = []
    for i in range(model.n_legs):
        phases = sched.leg_phases(i)
        durations, dur_jac = sched.durations_and_jacobian(i)
        prefix = np.zeros_like(dur_jac)
        if dur_jac.shape[0] > 1:
            prefix[1:] = np.cumsum(dur_jac[:-1], axis=0)

        # Foot hold slot per stance phase (x, y); z is the flat ground.
        hold_slots = {}
        for p, phase in enumerate(phases):
            if not phase.in_contact:
                continue
            key = (i, phase.phase_id)
            if p == 0 and key in pinned_feet:
                vals = pinned_feet[key]
                hold_slots[p] = (_pin(vals[0]), _pin(vals[1]))
            else:
                hold_slots[p] = (
                    (VAR, new_var((i, "foot", phase.phase_id, 0))),
                    (VAR, new_var((i, "foot", phase.phase_id, 1))),
                )

        force_channels = [Channel([]) for _ in range(3)]
        foot_channels = [Channel([]) for _ in range(3)]
        ns = cfg.force_subsegments
        for p, phase in enumerate(phases):
            dur = max(phase.t_end - phase.t_start, 1e-9)
            if phase.in_contact:
                # Forces: ns Hermite sub-segments, zero-pinned at contact changes.
                sub = dur / ns
                starts_with_touchdown = p > 0 or (
                    phase.t_start > sched.t_now + 1e-12
                )
                ends_with_liftoff = not phase.open_ended
                for d in range(3):
                    junction = []
                    for j in range(ns + 1):
                        boundary = (j == 0 and starts_with_touchdown) or (
                            j == ns and ends_with_liftoff
                        )
                        if boundary:
                            junction.append((_pin(0.0), _pin(0.0)))
                        else:
                            junction.append(
                                (
                                    (VAR, new_var((i, "force", phase.phase_id, d, j, "v"))),
                                    (VAR, new_var((i, "force", phase.phase_id, d, j, "r"))),
                                )
                            )
                    for j in range(ns):
                        force_channels[d].pieces.append(
                            Piece(
                                start=phase.t_start + j * sub,
                                duration=sub,
                                phase_index=p,
                                frac=1.0 / ns,
                                k_offset=j / ns,
                                slots_val=(junction[j][0], junction[j + 1][0]),
                                slots_rate=(junction[j][1], junction[j + 1][1]),
                            )
                        )
                # Feet: constant hold (shared slot at both ends drops the
                # duration dependence identically).
                hx, hy = hold_slots[p]
                for d, slot in ((0, hx), (1, hy)):
                    foot_channels[d].pieces.append(
                        Piece(phase.t_start, dur, p, 1.0, 0.0, (slot, slot), (_pin(0.0), _pin(0.0)))
                    )
                foot_channels[2].pieces.append(
                    Piece(phase.t_start, dur, p, 1.0, 0.0, (_pin(0.0), _pin(0.0)), (_pin(0.0), _pin(0.0)), zero=True)
                )
            else:
                for d in range(3):
                    force_channels[d].pieces.append(
                        Piece(phase.t_start, dur, p, 1.0, 0.0, (_pin(0.0), _pin(0.0)), (_pin(0.0), _pin(0.0)), zero=True)
                    )
                key = (i, phase.phase_id)
                anchor = pinned_feet.get(key)
                prev_hold = hold_slots.get(p - 1)
                next_hold = hold_slots.get(p + 1)
                if prev_hold is None:
                    if anchor is not None:
                        prev_hold = (_pin(anchor[0]), _pin(anchor[1]))
                    else:
                        off = model.leg_offsets[i]
                        prev_hold = (_pin(off[0]), _pin(off[1]))
                if next_hold is None:
                    next_hold = prev_hold  # open-ended swing: drift-free hold
                for d in range(2):
                    foot_channels[d].pieces.append(
                        Piece(
                            phase.t_start,
                            dur,
                            p,
                            1.0,
                            0.0,
                            (prev_hold[d], next_hold[d]),
                            (_pin(0.0), _pin(0.0)),
                        )
                    )
                # Vertical arc through the apex, two half-duration pieces.
                z_start = anchor[2] if anchor is not None and len(anchor) > 2 else 0.0
                apex = cfg.swing_apex
                foot_channels[2].pieces.append(
                    Piece(phase.t_start, dur / 2, p, 0.5, 0.0, (_pin(z_start), _pin(apex)), (_pin(0.0), _pin(0.0)))
                )
                foot_channels[2].pieces.append(
                    Piece(
                        phase.t_start + dur / 2,
                        dur / 2,
                        p,
                        0.5,
                        0.5,
                        (_pin(apex), _pin(0.0)),
                        (_pin(0.0), _pin(0.0)),
                    )
                )
        legs.append(
            LegStructure(
                phases=phases,
                force=force_channels,
                foot=foot_channels,
                durations=durations,
                dur_jac=dur_jac,
                dur_jac_prefix=prefix,
            )
        )
    theta_key = tuple(float(v) for v in sched.theta_free())
    return MpcStructure(
        cfg=cfg,
        model=model,
        t0=sched.t_now,
        node_times=node_times,
        legs=legs,
        var_keys=var_keys,
        n_free=n_free,
        theta_key=theta_key,
        pinned_feet=dict(pinned_feet),
        locks=dict(locks),
    )


# --- iterate ----------------------------------------------------------------


@dataclass
class MpcIterate:
    states: list
    w: np.ndarray
    structure: MpcStructure
    x0: SrbState
    qp: Optional[QpProblem] = None
    sol: Optional[QpSolution] = None
    cost_qp: float = math.inf
    cost_model: float = math.inf
    pinned_feet: dict = field(default_factory=dict)
    locks: dict = field(default_factory=dict)
    stale: bool = False

    def w_by_key(self) -> dict:
        return {key: self.w[k] for k, key in enumerate(self.structure.var_keys)}

    def force_at(self, leg: int, t: float) -> np.ndarray:
        return self._channel_vec(self.structure.legs[leg].force, t, leg)

    def foot_at(self, leg: int, t: float) -> np.ndarray:
        return self._channel_vec(self.structure.legs[leg].foot, t, leg)

    def _channel_vec(self, channels, t, leg) -> np.ndarray:
        out = np.zeros(3)
        ls = self.structure.legs[leg]
        for d in range(3):
            ev = _eval_channel(channels[d], ls, t, False, 0)
            out[d] = ev.const + (ev.weights @ self.w[ev.cols] if ev.cols else 0.0)
        return out


def _default_w(cfg: MpcConfig, model: SrbParams, x0: SrbState, key) -> float:
    if key[1] == "force":
        _, _, _, dim, _, role = key
        if role == "v" and dim == 2:
            return model.mass * model.gravity[2] / 2.0
        return 0.0
    leg, _, _, dim = key
    return float(x0.r[dim] + model.leg_offsets[leg][dim])


def make_initial_iterate(
    cfg: MpcConfig, model: SrbParams, sched: ContactSchedule, x0: SrbState
) -> MpcIterate:
    pins = {}
    for i in range(model.n_legs):
        phase = sched.leg_phases(i)[0]
        foot = np.array(
            [x0.r[0] + model.leg_offsets[i][0], x0.r[1] + model.leg_offsets[i][1], 0.0]
        )
        pins[(i, phase.phase_id)] = foot
    structure = build_structure(cfg, model, sched, pins, {})
    w = np.array([_default_w(cfg, model, x0, key) for key in structure.var_keys])
    states = [x0] * cfg.num_nodes
    return MpcIterate(
        states=states, w=w, structure=structure, x0=x0, pinned_feet=pins, locks={}
    )


def _carry_over(prev: MpcIterate, cfg, model, sched, x0):
    """Pins, locks, resampled guess states, and warm decision values."""
    pins = {}
    locks = {}
    for i in range(model.n_legs):
        phases = sched.leg_phases(i)
        current = phases[0]
        key = (i, current.phase_id)
        try:
            pins[key] = prev.foot_at(i, sched.t_now)
        except Exception:
            off = model.leg_offsets[i]
            pins[key] = np.array([x0.r[0] + off[0], x0.r[1] + off[1], 0.0])
        if not current.in_contact:
            span = current.t_end - current.t_start
            done = (sched.t_now - current.t_start) / span if span > 0 else 1.0
            if done >= cfg.touchdown_lock_fraction and len(phases) > 1:
                lock_key = (i, phases[1].phase_id)
                if lock_key in prev.locks:
                    locks[lock_key] = prev.locks[lock_key]
                else:
                    w_prev = prev.w_by_key()
                    vx = w_prev.get((i, "foot", phases[1].phase_id, 0))
                    vy = w_prev.get((i, "foot", phases[1].phase_id, 1))
                    if vx is not None and vy is not None:
                        locks[lock_key] = np.array([vx, vy])

    # Shift the state guess: node k of the new horizon reuses the previous
    # plan at the same wall-clock time where available.
    prev_t = prev.structure.node_times
    states = []
    for t in sched.t_now + cfg.dt * np.arange(cfg.num_nodes):
        j = int(round((t - prev_t[0]) / cfg.dt))
        states.append(prev.states[min(max(j, 0), len(prev.states) - 1)])
    return pins, locks, states


def _warm_w(structure: MpcStructure, prev: MpcIterate, cfg, model, x0) -> np.ndarray:
    prev_map = prev.w_by_key()
    w = np.empty(structure.n_w)
    for k, key in enumerate(structure.var_keys):
        if key in prev_map:
            w[k] = prev_map[key]
        else:
            w[k] = _default_w(cfg, model, x0, key)
    return w


# --- assembly ----------------------------------------------------------------


class _JacAccumulator:
    """COO accumulators for the per-parameter block derivatives."""

    def __init__(self, n_free, n_z, n_eq, n_in):
        self.n_free = n_free
        self.n_z, self.n_eq, self.n_in = n_z, n_eq, n_in
        self.dA = [([], [], []) for _ in range(n_free)]
        self.dG = [([], [], []) for _ in range(n_free)]
        self.dQ = [([], [], []) for _ in range(n_free)]
        self.db = np.zeros((n_free, n_eq))
        self.dh = np.zeros((n_free, n_in))
        self.dq = np.zeros((n_free, n_z))
        self.dc0 = np.zeros(n_free)

    @staticmethod
    def _push(acc, row, cols, vals):
        r, c, v = acc
        r.extend([row] * len(cols))
        c.extend(cols)
        v.extend(vals)

    def add_dA(self, m, row, cols, vals):
        self._push(self.dA[m], row, cols, vals)

    def add_dG(self, m, row, cols, vals):
        self._push(self.dG[m], row, cols, vals)

    def add_dQ(self, m, rows, cols, vals):
        r, c, v = self.dQ[m]
        r.extend(rows)
        c.extend(cols)
        v.extend(vals)

    def build(self) -> ParamJacobians:
        def mats(acc, shape):
            out = []
            for r, c, v in acc:
                if r:
                    out.append(sp.coo_matrix((v, (r, c)), shape=shape).tocsr())
                else:
                    out.append(None)
            return out

        def vecs(arr):
            return [row if np.any(row) else None for row in arr]

        return ParamJacobians(
            dQ=mats(self.dQ, (self.n_z, self.n_z)),
            dq=vecs(self.dq),
            dA=mats(self.dA, (self.n_eq, self.n_z)),
            db=vecs(self.db),
            dG=mats(self.dG, (self.n_in, self.n_z)),
            dh=vecs(self.dh),
        )


@dataclass
class BuildInfo:
    structure: MpcStructure
    c0: float
    n_eq: int
    n_in: int
    jacobians: Optional[ParamJacobians] = None
    cost_const_grad: Optional[np.ndarray] = None


def assemble(
    cfg: MpcConfig,
    model: SrbParams,
    structure: MpcStructure,
    states,
    w_guess: np.ndarray,
    x0: SrbState,
    with_derivs: bool = False,
):
    """Build the QP (and optionally its contact-time block derivatives)."""
    N = cfg.num_nodes
    n_x, n_w, n_z = structure.n_x, structure.n_w, structure.n_z
    n_free = structure.n_free if with_derivs else 0
    if len(states) != N:
        raise DimensionMismatchError(f"guess has {len(states)} states, expected {N}")
    if w_guess.shape != (n_w,):
        raise DimensionMismatchError("guess decision vector has wrong length")
    x_ref = cfg.target_state()
    n_legs = model.n_legs

    # Evaluate channels at every node once.
    force_ev = [[None] * n_legs for _ in range(N)]
    foot_ev = [[None] * n_legs for _ in range(N)]
    stance = np.zeros((N, n_legs), dtype=bool)
    for i in range(N):
        t = structure.node_times[i]
        for leg in range(n_legs):
            ls = structure.legs[leg]
            stance[i, leg] = structure.stance(i, leg)
            force_ev[i][leg] = [
                _eval_channel(ls.force[d], ls, t, with_derivs, structure.n_free)
                for d in range(3)
            ]
            if stance[i, leg]:
                foot_ev[i][leg] = [
                    _eval_channel(ls.foot[d], ls, t, with_derivs, structure.n_free)
                    for d in range(3)
                ]

    def channel_value(ev):
        return ev.const + (ev.weights @ w_guess[ev.cols] if ev.cols else 0.0)

    def leg_vec(evs):
        return np.array([channel_value(e) for e in evs])

    def leg_vec_grads(evs):
        # (n_free, 3): derivative of the evaluated vector w.r.t. each theta.
        out = np.zeros((structure.n_free, 3))
        for d, e in enumerate(evs):
            out[:, d] = e.dconst
            if e.cols:
                out[:, d] += e.dweights @ w_guess[e.cols]
        return out

    n_eq = X_DIM * N
    lock_rows = []
    for (leg, pid), value in structure.locks.items():
        for d in range(2):
            key = (leg, "foot", pid, d)
            idx = None
            for k, var_key in enumerate(structure.var_keys):
                if var_key == key:
                    idx = k
                    break
            if idx is not None:
                lock_rows.append((idx, float(value[d])))
    n_eq += len(lock_rows)

    rows_per_stance = 10  # 2 vertical bounds + 4 friction + 4 leg-box
    n_in = int(stance.sum()) * rows_per_stance

    A = np.zeros((n_eq, n_z))
    b = np.zeros(n_eq)
    G = np.zeros((n_in, n_z))
    h = np.zeros(n_in)
    Q = np.zeros((n_z, n_z))
    qv = np.zeros(n_z)
    c0 = 0.0
    acc = _JacAccumulator(n_free, n_z, n_eq, n_in) if with_derivs else None

    def xcols(i):
        return slice(X_DIM * i, X_DIM * (i + 1))

    def wcol(j):
        return n_x + j

    # Initial condition rows.
    A[0:X_DIM, 0:X_DIM] = np.eye(X_DIM)
    b[0:X_DIM] = state_difference(x0, states[0])

    # Dynamics rows.
    for i in range(N - 1):
        r0 = X_DIM * (i + 1)
        rows = slice(r0, r0 + X_DIM)
        forces = np.vstack([leg_vec(force_ev[i][leg]) for leg in range(n_legs)])
        feet = np.zeros((n_legs, 3))
        for leg in range(n_legs):
            if stance[i, leg]:
                feet[leg] = leg_vec(foot_ev[i][leg])
        u_bar = SrbInput(forces=forces, feet=feet)
        A_c, B_c = linearize(states[i], u_bar, model)
        A_d = np.eye(X_DIM) + cfg.dt * A_c
        defect = state_difference(euler_step(states[i], u_bar, model, cfg.dt), states[i + 1])

        A[rows, xcols(i + 1)] = np.eye(X_DIM)
        A[rows, xcols(i)] = -A_d
        b[rows] = defect
        for leg in range(n_legs):
            Bf = cfg.dt * B_c[:, 3 * leg : 3 * leg + 3]
            Be = cfg.dt * B_c[:, 3 * (n_legs + leg) : 3 * (n_legs + leg) + 3]
            for d in range(3):
                ev = force_ev[i][leg][d]
                for col, wgt in zip(ev.cols, ev.weights):
                    A[rows, wcol(col)] -= Bf[:, d] * wgt
                    b[rows] -= Bf[:, d] * (wgt * w_guess[col])
            if stance[i, leg]:
                for d in range(2):  # vertical foot position is pinned
                    ev = foot_ev[i][leg][d]
                    for col, wgt in zip(ev.cols, ev.weights):
                        A[rows, wcol(col)] -= Be[:, d] * wgt
                        b[rows] -= Be[:, d] * (wgt * w_guess[col])

        if with_derivs:
            for leg in range(n_legs):
                fg = leg_vec_grads(force_ev[i][leg])  # (n_free, 3)
                eg = (
                    leg_vec_grads(foot_ev[i][leg])
                    if stance[i, leg]
                    else np.zeros((structure.n_free, 3))
                )
                Bf = cfg.dt * B_c[:, 3 * leg : 3 * leg + 3]
                Be = cfg.dt * B_c[:, 3 * (n_legs + leg) : 3 * (n_legs + leg) + 3]
                F_bar = forces[leg]
                e_bar = feet[leg]
                Fvar = F_bar - np.array([force_ev[i][leg][d].const for d in range(3)])
                evar = e_bar - (
                    np.array([foot_ev[i][leg][d].const for d in range(3)])
                    if stance[i, leg]
                    else np.zeros(3)
                )
                for m in range(structure.n_free):
                    Fp = fg[m]
                    ep = eg[m]
                    if not (Fp.any() or ep.any()):
                        continue
                    dAc_r = skew(Fp)  # d(ang row)/d r block
                    dBf_ang = skew(ep)
                    dBe_ang = -skew(Fp)
                    # d(-A_d) on the x_i columns, angular rows only.
                    xi = X_DIM * i
                    for rr in range(3):
                        acc.add_dA(
                            m,
                            r0 + 9 + rr,
                            [xi + 0, xi + 1, xi + 2],
                            list(-cfg.dt * dAc_r[rr]),
                        )
                    # d(-B_d W) on w columns: the dB_c part on angular rows
                    # plus the B_c dW part on every row.
                    for d in range(3):
                        ev = force_ev[i][leg][d]
                        for col, wgt in zip(ev.cols, ev.weights):
                            for rr in range(3):
                                acc.add_dA(
                                    m,
                                    r0 + 9 + rr,
                                    [wcol(col)],
                                    [-cfg.dt * dBf_ang[rr, d] * wgt],
                                )
                        if ev.cols:
                            dwgt = ev.dweights[m]
                            vals_rows = -(Bf[:, d][:, None] * dwgt[None, :])
                            for rr in range(X_DIM):
                                row_vals = vals_rows[rr]
                                if np.any(row_vals):
                                    acc.add_dA(
                                        m,
                                        r0 + rr,
                                        [wcol(c) for c in ev.cols],
                                        list(row_vals),
                                    )
                    if stance[i, leg]:
                        for d in range(2):
                            ev = foot_ev[i][leg][d]
                            for col, wgt in zip(ev.cols, ev.weights):
                                for rr in range(3):
                                    acc.add_dA(
                                        m,
                                        r0 + 9 + rr,
                                        [wcol(col)],
                                        [-cfg.dt * dBe_ang[rr, d] * wgt],
                                    )
                            if ev.cols:
                                dwgt = ev.dweights[m]
                                vals_rows = -(Be[:, d][:, None] * dwgt[None, :])
                                for rr in range(X_DIM):
                                    row_vals = vals_rows[rr]
                                    if np.any(row_vals):
                                        acc.add_dA(
                                            m,
                                            r0 + rr,
                                            [wcol(c) for c in ev.cols],
                                            list(row_vals),
                                        )
                    # db: dt*B_c*dconst - dt*dB_c*(u_var).
                    dconst_f = fg[m] - np.array(
                        [
                            force_ev[i][leg][d].dweights[m] @ w_guess[force_ev[i][leg][d].cols]
                            if force_ev[i][leg][d].cols
                            else 0.0
                            for d in range(3)
                        ]
                    )
                    acc.db[m, rows] += Bf @ dconst_f
                    if stance[i, leg]:
                        dconst_e = eg[m] - np.array(
                            [
                                foot_ev[i][leg][d].dweights[m] @ w_guess[foot_ev[i][leg][d].cols]
                                if foot_ev[i][leg][d].cols
                                else 0.0
                                for d in range(3)
                            ]
                        )
                        acc.db[m, rows] += Be @ dconst_e
                    ang = slice(r0 + 9, r0 + 12)
                    acc.db[m, ang] -= cfg.dt * (dBf_ang @ Fvar + dBe_ang @ evar)

    # Touchdown locks.
    for k, (idx, value) in enumerate(lock_rows):
        row = X_DIM * N + k
        A[row, wcol(idx)] = 1.0
        b[row] = value

    # Inequalities.
    row = 0
    mu = model.mu
    for i in range(N):
        for leg in range(n_legs):
            if not stance[i, leg]:
                continue
            evf = force_ev[i][leg]
            evz, evx, evy = evf[2], evf[0], evf[1]

            def put(ev_list, rhs, rr):
                # Row: sum of signed channel values <= rhs.
                const = 0.0
                for ev, s in ev_list:
                    for col, wgt in zip(ev.cols, ev.weights):
                        G[rr, wcol(col)] += s * wgt
                    const += s * ev.const
                h[rr] = rhs - const
                if with_derivs:
                    for m in range(structure.n_free):
                        cols, vals = [], []
                        dh_val = 0.0
                        for ev, s in ev_list:
                            if ev.cols:
                                cols.extend(wcol(c) for c in ev.cols)
                                vals.extend(s * ev.dweights[m])
                            dh_val -= s * ev.dconst[m]
                        if cols:
                            acc.add_dG(m, rr, cols, vals)
                        acc.dh[m, rr] = dh_val

            put([(evz, 1.0)], model.f_max, row)
            put([(evz, -1.0)], 0.0, row + 1)
            put([(evx, 1.0), (evz, -mu)], 0.0, row + 2)
            put([(evx, -1.0), (evz, -mu)], 0.0, row + 3)
            put([(evy, 1.0), (evz, -mu)], 0.0, row + 4)
            put([(evy, -1.0), (evz, -mu)], 0.0, row + 5)

            # Leg box relative to the CoM, horizontal components.
            eve = foot_ev[i][leg]
            off = model.leg_offsets[leg]
            half = model.box_half
            rr = row + 6
            for d in range(2):
                for sign in (1.0, -1.0):
                    ev = eve[d]
                    for col, wgt in zip(ev.cols, ev.weights):
                        G[rr, wcol(col)] += sign * wgt
                    G[rr, X_DIM * i + d] -= sign
                    h[rr] = half[d] + sign * (off[d] + states[i].r[d]) - sign * ev.const
                    if with_derivs:
                        for m in range(structure.n_free):
                            if ev.cols:
                                acc.add_dG(
                                    m, rr, [wcol(c) for c in ev.cols], list(sign * ev.dweights[m])
                                )
                            acc.dh[m, rr] -= sign * ev.dconst[m]
                    rr += 1
            row += rows_per_stance

    # Costs.
    wx = cfg.state_weights()
    for i in range(N):
        scale = cfg.terminal_scale if i == N - 1 else 1.0
        diag = scale * wx
        err = state_difference(states[i], x_ref)
        cols = xcols(i)
        Q[cols, cols] += np.diag(diag)
        qv[cols] += diag * err
        c0 += 0.5 * float(diag @ err**2)

    for i in range(N):
        for leg in range(n_legs):
            if not stance[i, leg]:
                continue
            for d in range(3):
                ev = force_ev[i][leg][d]
                if not ev.cols:
                    continue
                idx = [wcol(c) for c in ev.cols]
                Q[np.ix_(idx, idx)] += cfg.w_force * np.outer(ev.weights, ev.weights)
                if with_derivs:
                    for m in range(structure.n_free):
                        dwgt = ev.dweights[m]
                        if not np.any(dwgt):
                            continue
                        block = cfg.w_force * (
                            np.outer(dwgt, ev.weights) + np.outer(ev.weights, dwgt)
                        )
                        rows_idx = np.repeat(idx, len(idx))
                        cols_idx = np.tile(idx, len(idx))
                        acc.add_dQ(m, list(rows_idx), list(cols_idx), list(block.ravel()))
            # Foot deviation from the guessed CoM plus the nominal offset.
            for d in range(2):
                ev = foot_ev[i][leg][d]
                p_nom = states[i].r[d] + model.leg_offsets[leg][d]
                resid0 = ev.const - p_nom
                if ev.cols:
                    idx = [wcol(c) for c in ev.cols]
                    Q[np.ix_(idx, idx)] += cfg.w_foot * np.outer(ev.weights, ev.weights)
                    qv[idx] += cfg.w_foot * ev.weights * resid0
                c0 += 0.5 * cfg.w_foot * resid0**2
                if with_derivs:
                    for m in range(structure.n_free):
                        if ev.cols and np.any(ev.dweights[m]):
                            dwgt = ev.dweights[m]
                            block = cfg.w_foot * (
                                np.outer(dwgt, ev.weights) + np.outer(ev.weights, dwgt)
                            )
                            rows_idx = np.repeat(idx, len(idx))
                            cols_idx = np.tile(idx, len(idx))
                            acc.add_dQ(m, list(rows_idx), list(cols_idx), list(block.ravel()))
                            acc.dq[m, idx] += cfg.w_foot * (
                                dwgt * resid0 + ev.weights * ev.dconst[m]
                            )
                        elif ev.cols:
                            acc.dq[m, idx] += cfg.w_foot * ev.weights * ev.dconst[m]
                        acc.dc0[m] += cfg.w_foot * resid0 * ev.dconst[m]

    if n_w:
        wslice = slice(n_x, n_z)
        Q[wslice, wslice] += cfg.w_ridge * np.eye(n_w)

    problem = QpProblem(Q=Q, q=qv, A=A, b=b, G=G, h=h)
    info = BuildInfo(structure=structure, c0=c0, n_eq=n_eq, n_in=n_in)
    if with_derivs:
        info.jacobians = acc.build()
        info.cost_const_grad = acc.dc0
    return problem, info


def build_qp(cfg, model, sched, guess: MpcIterate, x0: SrbState):
    """Assemble the QP about the guess iterate for the given schedule."""
    return assemble(cfg, model, guess.structure, guess.states, guess.w, x0)


def rt_iteration(
    cfg: MpcConfig, model: SrbParams, sched: ContactSchedule, prev: MpcIterate, x0: SrbState
) -> MpcIterate:
    """One build-and-solve cycle, warm-started from the previous iterate."""
    pins, locks, states = _carry_over(prev, cfg, model, sched, x0)
    structure = build_structure(cfg, model, sched, pins, locks)
    w_bar = _warm_w(structure, prev, cfg, model, x0)
    problem, info = assemble(cfg, model, structure, states, w_bar, x0)
    warm = (
        prev.sol
        if prev.sol is not None and prev.structure.var_keys == structure.var_keys
        else None
    )
    sol = solve_qp(problem, warm_start=warm)
    if sol.status is not QpStatus.OPTIMAL:
        return replace(prev, stale=True)
    n_x = structure.n_x
    new_states = [
        apply_tangent(states[i], sol.z[X_DIM * i : X_DIM * (i + 1)]) for i in range(cfg.num_nodes)
    ]
    return MpcIterate(
        states=new_states,
        w=sol.z[n_x:].copy(),
        structure=structure,
        x0=x0,
        qp=problem,
        sol=sol,
        cost_qp=sol.obj,
        cost_model=sol.obj + info.c0,
        pinned_feet=pins,
        locks=locks,
        stale=False,
    )


def eval_cost(cfg, model, sched, x0, warm: MpcIterate, n_solves: int = 1) -> float:
    """Cost of the quadratic model after n_solves warm-started iterations."""
    if n_solves < 1:
        raise ValueError("n_solves must be >= 1")
    it = warm
    for _ in range(n_solves):
        it = rt_iteration(cfg, model, sched, it, x0)
        if it.stale:
            raise SolverFailure("QP solve failed during cost evaluation")
    return it.cost_model


def param_jacobians(cfg, model, sched, iterate: MpcIterate):
    """Analytic derivatives of the built QP blocks w.r.t. free contact times.

    Returns (jacobians, cost_const_grad); the latter is the derivative of
    the guess-residual constant that completes the model-cost gradient.
    """
    if tuple(float(v) for v in sched.theta_free()) != iterate.structure.theta_key:
        raise ValueError("iterate was built under a different schedule")
    _, info = assemble(
        cfg,
        model,
        iterate.structure,
        iterate.states,
        iterate.w,
        iterate.x0,
        with_derivs=True,
    )
    return info.jacobians, info.cost_const_grad
