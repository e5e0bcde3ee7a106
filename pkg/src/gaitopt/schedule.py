"""Per-leg contact-change times, their polytope, and time bookkeeping.

A schedule stores, for each leg, the ordered future times at which the
leg's contact state flips, plus the contact state at the current time.
The free (optimizable) entries live in a polytope: ordering with a
minimum phase duration, a bound on the spread between the first and last
change, and a lower bound at the current time.  Entries become frozen
when they concern a swinging leg's imminent touchdown or were appended
since the last high-level update; past changes are consumed by
advance_time.  Schedules are immutable; updates return new values.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import PolytopeViolationError

BOUNDARY_EPS = 1e-12
FEAS_TOL = 1e-9


@dataclass(frozen=True)
class LegTimeline:
    changes: tuple
    protected: tuple
    fresh: tuple
    in_contact: bool
    phase_start: float
    changes_done: int = 0
    pattern: Optional[tuple] = None  # (stance_duration, swing_duration) or None

    def contact_after(self, count: int) -> bool:
        return self.in_contact if count % 2 == 0 else not self.in_contact


@dataclass(frozen=True)
class PhaseSpec:
    phase_id: int
    t_start: float
    t_end: float
    in_contact: bool
    seg_index: int
    open_ended: bool = False  # trailing filler segment with no closing change


@dataclass(frozen=True)
class ContactSchedule:
    legs: tuple
    t_now: float
    horizon: float
    k_min: float = 0.1
    k_end: float = 1.0
    swing_freeze_fraction: float = 0.0

    @property
    def n_legs(self) -> int:
        return len(self.legs)

    def free_entries(self):
        """(leg, change-index) pairs of optimizable entries, leg-major order."""
        out = []
        for i, leg in enumerate(self.legs):
            for j in range(len(leg.changes)):
                if not leg.protected[j] and not leg.fresh[j]:
                    out.append((i, j))
        return out

    def theta_free(self) -> np.ndarray:
        return np.array([self.legs[i].changes[j] for i, j in self.free_entries()])

    def polytope_rows(self):
        """Rows (A, b) with A @ theta_free <= b encoding the timing polytope."""
        entries = self.free_entries()
        col = {e: k for k, e in enumerate(entries)}
        nf = len(entries)
        rows, rhs = [], []

        def add(coeffs, bound):
            row = np.zeros(nf)
            for idx, val in coeffs:
                row[idx] = val
            rows.append(row)
            rhs.append(bound)

        for i, leg in enumerate(self.legs):
            n = len(leg.changes)
            for j in range(n):
                free_j = (i, j) in col
                if j == 0:
                    if free_j:
                        add([(col[(i, 0)], -1.0)], -self.t_now)
                    continue
                free_prev = (i, j - 1) in col
                if free_j and free_prev:
                    add([(col[(i, j)], -1.0), (col[(i, j - 1)], 1.0)], -self.k_min)
                elif free_j:
                    add([(col[(i, j)], -1.0)], -(leg.changes[j - 1] + self.k_min))
                elif free_prev:
                    add([(col[(i, j - 1)], 1.0)], leg.changes[j] - self.k_min)
            if n >= 2:
                free_first = (i, 0) in col
                free_last = (i, n - 1) in col
                if free_first and free_last:
                    add([(col[(i, n - 1)], 1.0), (col[(i, 0)], -1.0)], self.k_end)
                elif free_last:
                    add([(col[(i, n - 1)], 1.0)], self.k_end + leg.changes[0])
                elif free_first:
                    add([(col[(i, 0)], -1.0)], self.k_end - leg.changes[n - 1])
        if rows:
            return np.vstack(rows), np.array(rhs)
        return np.zeros((0, nf)), np.zeros(0)

    def polytope_residual(self) -> float:
        """min(b - A theta); negative means the polytope is violated."""
        A, b = self.polytope_rows()
        if b.size == 0:
            return np.inf
        return float((b - A @ self.theta_free()).min())

    # -- phase structure ----------------------------------------------------

    def leg_phases(self, i: int):
        """Phases covering [t_now, t_now + horizon] for leg i."""
        leg = self.legs[i]
        end = self.t_now + self.horizon
        phases = []
        start = self.t_now
        contact = leg.in_contact
        seg = 0
        for j, change in enumerate(leg.changes):
            phases.append(PhaseSpec(leg.changes_done + j, start, change, contact, seg))
            start = change
            contact = not contact
            seg += 1
        if start < end - BOUNDARY_EPS or not phases:
            phases.append(
                PhaseSpec(leg.changes_done + len(leg.changes), start, end, contact, seg, True)
            )
        return phases

    def durations_and_jacobian(self, i: int):
        """Per-segment durations of leg i and their free-theta Jacobian."""
        entries = self.free_entries()
        col = {e: k for k, e in enumerate(entries)}
        phases = self.leg_phases(i)
        durations = np.array([p.t_end - p.t_start for p in phases])
        jac = np.zeros((len(phases), len(entries)))
        leg = self.legs[i]
        for k, phase in enumerate(phases):
            j_end = phase.seg_index  # change closing this phase
            if not phase.open_ended and (i, j_end) in col:
                jac[k, col[(i, j_end)]] = 1.0
            j_start = phase.seg_index - 1
            if j_start >= 0 and j_start < len(leg.changes) and (i, j_start) in col:
                jac[k, col[(i, j_start)]] = -1.0
        return durations, jac

    # -- updates ------------------------------------------------------------

    def advance_time(self, t_new: float) -> "ContactSchedule":
        """Move the clock forward, consuming crossed changes and appending
        pattern-continuation changes (frozen for one high-level cycle) so
        the horizon stays covered as far as the spread bound allows."""
        if t_new < self.t_now - BOUNDARY_EPS:
            raise ValueError("advance_time cannot move backwards")
        new_legs = []
        for leg in self.legs:
            changes = list(leg.changes)
            protected = list(leg.protected)
            fresh = list(leg.fresh)

            # Extend with the leg's pattern before dropping, so large jumps
            # still toggle the contact state the right number of times.
            if leg.pattern is not None:
                anchor = changes[-1] if changes else leg.phase_start
                count = len(changes)
                while anchor < t_new + self.horizon:
                    state_after = leg.contact_after(count)
                    dur = leg.pattern[0] if state_after else leg.pattern[1]
                    if dur <= 1e-6:
                        break
                    anchor += dur
                    changes.append(anchor)
                    protected.append(False)
                    fresh.append(True)
                    count += 1

            in_contact = leg.in_contact
            phase_start = leg.phase_start
            done = leg.changes_done
            while changes and changes[0] <= t_new + BOUNDARY_EPS:
                phase_start = changes.pop(0)
                protected.pop(0)
                fresh.pop(0)
                in_contact = not in_contact
                done += 1

            # Trim any appended tail that now busts the spread bound.
            while len(changes) >= 2 and fresh[-1] and changes[-1] - changes[0] > self.k_end:
                changes.pop()
                protected.pop()
                fresh.pop()

            protected = [False] * len(changes)
            if not in_contact and changes:
                span = changes[0] - phase_start
                frac = (t_new - phase_start) / span if span > 0 else 1.0
                if frac >= self.swing_freeze_fraction - BOUNDARY_EPS:
                    protected[0] = True
            new_legs.append(
                LegTimeline(
                    changes=tuple(changes),
                    protected=tuple(protected),
                    fresh=tuple(fresh),
                    in_contact=in_contact,
                    phase_start=phase_start,
                    changes_done=done,
                    pattern=leg.pattern,
                )
            )
        return replace(self, legs=tuple(new_legs), t_now=t_new)

    def apply_step(self, p: np.ndarray) -> "ContactSchedule":
        """Shift the free entries by p; the result must stay in the polytope."""
        entries = self.free_entries()
        if len(p) != len(entries):
            raise ValueError(f"step size {len(p)} != free count {len(entries)}")
        new_legs = [list(leg.changes) for leg in self.legs]
        for (i, j), dv in zip(entries, p):
            new_legs[i][j] += float(dv)
        legs = tuple(
            replace(leg, changes=tuple(new_legs[i])) for i, leg in enumerate(self.legs)
        )
        out = replace(self, legs=legs)
        resid = out.polytope_residual()
        if resid < -FEAS_TOL:
            raise PolytopeViolationError(f"step leaves the polytope by {-resid:.3e}")
        return out

    def release_fresh(self) -> "ContactSchedule":
        legs = tuple(
            replace(leg, fresh=tuple(False for _ in leg.fresh)) for leg in self.legs
        )
        return replace(self, legs=legs)

    def as_dict(self) -> dict:
        return {
            "t": self.t_now,
            "legs": [
                {
                    "contact": leg.in_contact,
                    "phase_start": leg.phase_start,
                    "changes": list(leg.changes),
                    "protected": list(leg.protected),
                    "fresh": list(leg.fresh),
                    "done": leg.changes_done,
                }
                for leg in self.legs
            ],
        }


# ---------------------------------------------------------------------------
# Pattern constructors

TROT_PAIRS = ((0, 3), (1, 2))
PACE_PAIRS = ((0, 2), (1, 3))


def _pattern_leg(t0, horizon, k_end, first_liftoff, stance, swing):
    changes = []
    t = first_liftoff
    to_swing = True
    while t < t0 + horizon:
        if changes and t - changes[0] > k_end:
            break
        changes.append(t)
        t += swing if to_swing else stance
        to_swing = not to_swing
    return LegTimeline(
        changes=tuple(changes),
        protected=tuple(False for _ in changes),
        fresh=tuple(False for _ in changes),
        in_contact=True,
        phase_start=t0,
        pattern=(stance, swing),
    )


def make_schedule(
    pattern: str,
    t0: float,
    horizon: float,
    k_min: float = 0.1,
    k_end: float = 1.0,
    stance: float = 0.3,
    swing: float = 0.3,
    lead: float = 0.05,
    n_legs: int = 4,
    swing_freeze_fraction: float = 0.0,
) -> ContactSchedule:
    """Initial schedule for a named gait pattern (stand, trot or pace).

    Trot and pace alternate two leg pairs, the second pair lifting off
    ``lead`` seconds after t0 and the first when the second lands.
    """
    pattern = pattern.lower()
    if pattern == "stand":
        legs = tuple(
            LegTimeline((), (), (), True, t0, pattern=None) for _ in range(n_legs)
        )
        return ContactSchedule(legs, t0, horizon, k_min, k_end, swing_freeze_fraction)
    if pattern == "trot":
        pairs = TROT_PAIRS
    elif pattern == "pace":
        pairs = PACE_PAIRS
    else:
        raise ValueError(f"unknown pattern {pattern!r}")
    first_lift = {}
    for leg in pairs[1]:
        first_lift[leg] = t0 + lead
    for leg in pairs[0]:
        first_lift[leg] = t0 + lead + swing
    legs = tuple(
        _pattern_leg(t0, horizon, k_end, first_lift[i], stance, swing)
        for i in range(n_legs)
    )
    return ContactSchedule(legs, t0, horizon, k_min, k_end, swing_freeze_fraction)
