"""Cubic Hermite spline trajectories with duration derivatives.

Segments interpolate endpoint values and rates over a duration Ts; a
trajectory chains segments end to end in global time.  Besides plain
evaluation, the module exposes the derivative of an evaluated value with
respect to any segment's duration (segment-shape change plus the time
shift of every later segment), and the same quantities at the level of
endpoint basis weights, which the MPC builder uses to differentiate its
assembled matrices with respect to contact times.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable

import numpy as np

from .errors import NonpositiveDurationError, OutOfHorizonError

MIN_DURATION = 1e-9


class SegmentKind(Enum):
    SWING = "swing"
    STANCE = "stance"
    ZERO_FORCE = "zero_force"
    CONSTANT_ZERO = "constant_zero"


_ZERO_KINDS = (SegmentKind.ZERO_FORCE, SegmentKind.CONSTANT_ZERO)


@dataclass(frozen=True)
class HermiteSegment:
    y0: float
    y1: float
    ydot0: float
    ydot1: float
    duration: float
    kind: SegmentKind = SegmentKind.SWING

    def __post_init__(self):
        if self.duration < MIN_DURATION:
            raise NonpositiveDurationError(f"segment duration {self.duration} too small")

    @property
    def is_zero(self) -> bool:
        return self.kind in _ZERO_KINDS


def coefficients(seg: HermiteSegment):
    """Cubic coefficients (a0, a1, a2, a3) of the segment's local polynomial."""
    if seg.duration <= 0:
        raise NonpositiveDurationError(f"duration {seg.duration}")
    ts = seg.duration
    dy = seg.y0 - seg.y1
    a0 = seg.y0
    a1 = seg.ydot0
    a2 = -(3.0 * dy + ts * (2.0 * seg.ydot0 + seg.ydot1)) / ts**2
    a3 = (2.0 * dy + ts * (seg.ydot0 + seg.ydot1)) / ts**3
    return a0, a1, a2, a3


def hermite_weights(tau: float, ts: float):
    """Basis weights (w_y0, w_yd0, w_y1, w_yd1) for the value at local time tau."""
    u = tau / ts
    w_y0 = 1.0 - 3.0 * u**2 + 2.0 * u**3
    w_y1 = 3.0 * u**2 - 2.0 * u**3
    w_yd0 = tau - 2.0 * tau**2 / ts + tau**3 / ts**2
    w_yd1 = -(tau**2) / ts + tau**3 / ts**2
    return np.array([w_y0, w_yd0, w_y1, w_yd1])


def hermite_rate_weights(tau: float, ts: float):
    """Basis weights for the time derivative at local time tau."""
    w_y0 = -6.0 * tau / ts**2 + 6.0 * tau**2 / ts**3
    w_y1 = -w_y0
    w_yd0 = 1.0 - 4.0 * tau / ts + 3.0 * tau**2 / ts**2
    w_yd1 = -2.0 * tau / ts + 3.0 * tau**2 / ts**2
    return np.array([w_y0, w_yd0, w_y1, w_yd1])


def hermite_weight_duration_grads(tau: float, ts: float):
    """d(value basis weights)/d(duration) at fixed local time tau."""
    g_y0 = 6.0 * tau**2 / ts**3 - 6.0 * tau**3 / ts**4
    g_y1 = -g_y0
    g_yd0 = 2.0 * tau**2 / ts**2 - 2.0 * tau**3 / ts**3
    g_yd1 = tau**2 / ts**2 - 2.0 * tau**3 / ts**3
    return np.array([g_y0, g_yd0, g_y1, g_yd1])


@dataclass(frozen=True)
class SplineTrajectory:
    segments: tuple
    t0: float = 0.0

    def __post_init__(self):
        for left, right in zip(self.segments, self.segments[1:]):
            if left.is_zero and right.is_zero:
                continue
            lv = 0.0 if left.is_zero else left.y1
            rv = 0.0 if right.is_zero else right.y0
            if lv != rv:
                raise ValueError(f"value discontinuity at junction: {lv} != {rv}")

    @property
    def horizon(self) -> float:
        return float(sum(s.duration for s in self.segments))

    @property
    def t_end(self) -> float:
        return self.t0 + self.horizon

    def segment_starts(self):
        starts = [self.t0]
        for seg in self.segments[:-1]:
            starts.append(starts[-1] + seg.duration)
        return starts

    def locate(self, t: float):
        """Active segment index and local time; half-open segments with the
        final horizon point closed."""
        if t < self.t0 - 1e-12 or t > self.t_end + 1e-12:
            raise OutOfHorizonError(f"t={t} outside [{self.t0}, {self.t_end}]")
        rel = t - self.t0
        acc = 0.0
        for k, seg in enumerate(self.segments):
            nxt = acc + seg.duration
            if rel < nxt or k == len(self.segments) - 1:
                return k, min(max(rel - acc, 0.0), seg.duration)
            acc = nxt
        raise OutOfHorizonError(f"t={t} outside trajectory")  # pragma: no cover


def eval_trajectory(traj: SplineTrajectory, t: float):
    """Value and time derivative at global time t."""
    k, tau = traj.locate(t)
    seg = traj.segments[k]
    if seg.is_zero:
        return 0.0, 0.0
    a0, a1, a2, a3 = coefficients(seg)
    value = a0 + tau * (a1 + tau * (a2 + tau * a3))
    rate = a1 + tau * (2.0 * a2 + 3.0 * a3 * tau)
    return value, rate


def d_eval_d_duration(traj: SplineTrajectory, t: float, seg_index: int) -> float:
    """Total derivative of the value at fixed global t w.r.t. one duration.

    Growing segment ``seg_index`` reshapes that segment's polynomial and
    translates every later segment in global time; both effects are
    included.  Times before the segment are unaffected.
    """
    if not 0 <= seg_index < len(traj.segments):
        raise IndexError(f"segment index {seg_index} out of range")
    k, tau = traj.locate(t)
    if k < seg_index:
        return 0.0
    if k == seg_index:
        seg = traj.segments[k]
        if seg.is_zero:
            return 0.0
        g_y0, g_yd0, _, g_yd1 = hermite_weight_duration_grads(tau, seg.duration)
        # Difference form cancels exactly for constant segments.
        return float(g_y0 * (seg.y0 - seg.y1) + g_yd0 * seg.ydot0 + g_yd1 * seg.ydot1)
    # Later segment: its local clock shifts back as the earlier duration grows.
    _, rate = eval_trajectory(traj, t)
    return -rate


def sample_rows(traj: SplineTrajectory, times: Iterable[float], label: str):
    """Rows (label, t, value, rate) for trace export."""
    rows = []
    for t in times:
        value, rate = eval_trajectory(traj, t)
        rows.append((label, float(t), value, rate))
    return rows
