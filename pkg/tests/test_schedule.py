import numpy as np
import pytest

from gaitopt.errors import PolytopeViolationError
from gaitopt.schedule import ContactSchedule, LegTimeline, make_schedule


def one_leg(changes, t_now=0.0, horizon=1.0, k_min=0.1, k_end=1.0, protected=None, pattern=None):
    n = len(changes)
    leg = LegTimeline(
        changes=tuple(changes),
        protected=tuple(protected or [False] * n),
        fresh=tuple([False] * n),
        in_contact=True,
        phase_start=t_now,
        pattern=pattern,
    )
    return ContactSchedule((leg,), t_now, horizon, k_min, k_end)


def test_polytope_two_changes_three_rows():
    sched = one_leg([0.3, 0.6], t_now=0.05)
    A, b = sched.polytope_rows()
    assert A.shape == (3, 2)
    theta = sched.theta_free()
    resid = b - A @ theta
    # Rows: theta1 >= t_now; theta2 - theta1 >= k_min; theta2 - theta1 <= k_end.
    expected = np.array([0.3 - 0.05, (0.6 - 0.3) - 0.1, 1.0 - (0.6 - 0.3)])
    assert np.allclose(np.sort(resid), np.sort(expected))


def test_polytope_all_frozen_is_empty():
    sched = one_leg([0.3, 0.6], protected=[True, True])
    A, b = sched.polytope_rows()
    assert A.shape == (0, 0)
    assert b.size == 0


def test_polytope_single_change():
    sched = one_leg([0.3])
    A, b = sched.polytope_rows()
    assert A.shape == (1, 1)
    assert A[0, 0] == -1.0 and b[0] == 0.0  # -theta <= -t_now


def test_advance_before_changes_only_moves_clock():
    sched = one_leg([0.3, 0.6])
    out = sched.advance_time(0.1)
    assert out.t_now == 0.1
    assert out.legs[0].changes == (0.3, 0.6)
    assert out.legs[0].in_contact is True
    assert out.legs[0].changes_done == 0


def test_advance_across_liftoff_toggles_and_protects():
    sched = one_leg([0.3, 0.6])
    out = sched.advance_time(0.35)
    leg = out.legs[0]
    assert leg.in_contact is False
    assert leg.changes == (0.6,)
    assert leg.changes_done == 1
    assert leg.phase_start == 0.3
    # Imminent touchdown of the swinging leg is excluded from optimization.
    assert leg.protected == (True,)
    assert out.free_entries() == []


def test_advance_beyond_horizon_refills():
    sched = one_leg([0.3, 0.6], pattern=(0.3, 0.3))
    out = sched.advance_time(2.0)
    leg = out.legs[0]
    assert leg.changes_done >= 2
    assert all(c > 2.0 for c in leg.changes)
    assert all(leg.fresh)
    assert leg.changes[-1] >= 2.0 + out.horizon - out.k_end  # spread-limited fill


def test_fresh_entries_excluded_until_released():
    sched = one_leg([0.3, 0.6], pattern=(0.3, 0.3), horizon=1.0)
    out = sched.advance_time(0.1)
    leg = out.legs[0]
    assert any(leg.fresh)
    free_before = len(out.free_entries())
    released = out.release_fresh()
    assert len(released.free_entries()) > free_before
    assert released.polytope_residual() >= -1e-9


def test_apply_step_identity():
    sched = one_leg([0.3, 0.6])
    out = sched.apply_step(np.zeros(2))
    assert out.legs[0].changes == (0.3, 0.6)


def test_apply_step_translation_preserves_gaps():
    sched = one_leg([0.3, 0.6])
    out = sched.apply_step(np.array([0.05, 0.05]))
    assert np.allclose(out.legs[0].changes, (0.35, 0.65))
    assert out.polytope_residual() >= -1e-9


def test_apply_step_to_gap_boundary_accepted():
    sched = one_leg([0.3, 0.6], k_min=0.1)
    out = sched.apply_step(np.array([0.0, -0.2]))  # gap becomes exactly k_min
    assert np.allclose(out.legs[0].changes, (0.3, 0.4))


def test_apply_step_violation_raises():
    sched = one_leg([0.3, 0.6], k_min=0.1)
    with pytest.raises(PolytopeViolationError):
        sched.apply_step(np.array([0.0, -0.25]))


def test_durations_and_jacobian_structure():
    sched = one_leg([0.3, 0.6], t_now=0.0, horizon=1.0)
    durs, jac = sched.durations_and_jacobian(0)
    # Segments: [0, 0.3], [0.3, 0.6], trailing filler [0.6, 1.0].
    assert np.allclose(durs, [0.3, 0.3, 0.4])
    assert np.allclose(jac[0], [1.0, 0.0])
    assert np.allclose(jac[1], [-1.0, 1.0])
    assert np.allclose(jac[2], [0.0, -1.0])


def test_duration_jacobian_excludes_frozen_columns():
    sched = one_leg([0.3, 0.6], protected=[True, False])
    durs, jac = sched.durations_and_jacobian(0)
    assert jac.shape == (3, 1)
    assert np.allclose(jac[:, 0], [0.0, 1.0, -1.0])


def test_duration_jacobian_matches_finite_difference():
    sched = one_leg([0.25, 0.45, 0.8], horizon=1.0)
    durs0, jac = sched.durations_and_jacobian(0)
    eps = 1e-7
    for col in range(3):
        p = np.zeros(3)
        p[col] = eps
        durs1, _ = sched.apply_step(p).durations_and_jacobian(0)
        fd = (durs1 - durs0) / eps
        assert np.allclose(fd, jac[:, col], atol=1e-9)


def test_uniform_spacing_durations():
    sched = one_leg([0.2, 0.4, 0.6, 0.8], horizon=0.8)
    durs, _ = sched.durations_and_jacobian(0)
    assert np.allclose(durs, 0.2)


def test_equally_long_phases_cover_horizon():
    sched = make_schedule("trot", 0.0, horizon=0.5)
    for i in range(4):
        phases = sched.leg_phases(i)
        assert phases[0].t_start == 0.0
        assert phases[-1].t_end >= 0.5 - 1e-12
        for a, b in zip(phases, phases[1:]):
            assert a.t_end == b.t_start
            assert a.in_contact != b.in_contact


def test_trot_pairs_out_of_phase():
    sched = make_schedule("trot", 0.0, horizon=0.6)
    assert sched.legs[0].changes == sched.legs[3].changes
    assert sched.legs[1].changes == sched.legs[2].changes
    assert sched.legs[0].changes != sched.legs[1].changes


def test_stand_has_no_changes_and_never_appends():
    sched = make_schedule("stand", 0.0, horizon=0.5)
    out = sched.advance_time(3.0)
    for leg in out.legs:
        assert leg.changes == ()
        assert leg.in_contact
    durs, jac = out.durations_and_jacobian(0)
    assert np.allclose(durs, [0.5])
    assert jac.shape == (1, 0)


def test_membership_invariant_under_update_sequences():
    rng = np.random.default_rng(9)
    sched = make_schedule("trot", 0.0, horizon=0.5)
    t = 0.0
    for _ in range(60):
        t += 0.05
        sched = sched.advance_time(t).release_fresh()
        A, b = sched.polytope_rows()
        nf = len(sched.free_entries())
        if nf:
            slack = b - A @ sched.theta_free()
            step = rng.uniform(-0.02, 0.02, size=nf)
            # Project the random step to stay feasible; skip when too tight.
            for _ in range(10):
                if slack.size == 0 or np.all(A @ step <= slack + 1e-12):
                    break
                step *= 0.5
            else:
                step = np.zeros(nf)
            if np.all(A @ step <= slack + 1e-12):
                sched = sched.apply_step(step)
        assert sched.polytope_residual() >= -1e-9
        for i in range(4):
            durs, _ = sched.durations_and_jacobian(i)
            phases = sched.leg_phases(i)
            inner = [
                d
                for d, p in zip(durs, phases)
                if p.t_start > sched.t_now + 1e-12 and not p.open_ended
            ]
            assert all(d >= sched.k_min - 1e-9 for d in inner)
            assert phases[-1].t_end >= sched.t_now + sched.horizon - 1e-9
