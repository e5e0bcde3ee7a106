import numpy as np
import pytest

from gaitopt.errors import NonpositiveDurationError, OutOfHorizonError
from gaitopt.spline import (
    HermiteSegment,
    SegmentKind,
    SplineTrajectory,
    coefficients,
    d_eval_d_duration,
    eval_trajectory,
    hermite_rate_weights,
    hermite_weights,
    sample_rows,
)


def seg(y0, y1, yd0, yd1, ts, kind=SegmentKind.SWING):
    return HermiteSegment(y0, y1, yd0, yd1, ts, kind)


def test_constant_segment_coefficients():
    a = coefficients(seg(2.5, 2.5, 0.0, 0.0, 0.7))
    assert a == (2.5, 0.0, 0.0, 0.0)


def test_smoothstep_coefficients():
    a = coefficients(seg(0.0, 1.0, 0.0, 0.0, 1.0))
    assert np.allclose(a, (0.0, 0.0, 3.0, -2.0))


def test_smoothstep_midpoint():
    traj = SplineTrajectory((seg(0.0, 1.0, 0.0, 0.0, 1.0),))
    value, _ = eval_trajectory(traj, 0.5)
    assert abs(value - 0.5) <= 1e-12


def test_nonpositive_duration_rejected():
    with pytest.raises(NonpositiveDurationError):
        seg(0.0, 1.0, 0.0, 0.0, 0.0)


def test_eval_start_and_zero_kinds():
    traj = SplineTrajectory(
        (
            seg(0.4, 0.0, 0.0, 0.0, 0.5),
            seg(0.0, 0.0, 0.0, 0.0, 0.3, SegmentKind.ZERO_FORCE),
            seg(0.0, 0.0, 0.0, 0.0, 0.2, SegmentKind.CONSTANT_ZERO),
        ),
        t0=1.0,
    )
    value, _ = eval_trajectory(traj, 1.0)
    assert value == 0.4
    assert eval_trajectory(traj, 1.65) == (0.0, 0.0)
    assert eval_trajectory(traj, 1.9) == (0.0, 0.0)
    with pytest.raises(OutOfHorizonError):
        eval_trajectory(traj, 2.1)
    with pytest.raises(OutOfHorizonError):
        eval_trajectory(traj, 0.9)


def test_junction_uses_right_segment():
    traj = SplineTrajectory((seg(0.0, 1.0, 0.0, 2.0, 1.0), seg(1.0, 0.0, 5.0, 0.0, 1.0)))
    _, rate = eval_trajectory(traj, 1.0)
    assert abs(rate - 5.0) <= 1e-12
    # Final horizon point is closed.
    value, _ = eval_trajectory(traj, 2.0)
    assert abs(value) <= 1e-12


def test_endpoint_interpolation_randomized():
    rng = np.random.default_rng(0)
    for _ in range(200):
        y0, y1, yd0, yd1 = rng.normal(size=4)
        ts = rng.uniform(0.05, 2.0)
        s = seg(y0, y1, yd0, yd1, ts)
        traj = SplineTrajectory((s,))
        v0, r0 = eval_trajectory(traj, 0.0)
        v1, r1 = eval_trajectory(traj, ts)
        scale = max(1.0, abs(y0), abs(y1), abs(yd0), abs(yd1))
        assert abs(v0 - y0) <= 1e-12 * scale
        assert abs(r0 - yd0) <= 1e-12 * scale
        assert abs(v1 - y1) <= 1e-12 * scale * 10
        assert abs(r1 - yd1) <= 1e-12 * scale * 10


def test_weights_match_polynomial():
    rng = np.random.default_rng(1)
    for _ in range(50):
        nodes = rng.normal(size=4)  # y0, yd0, y1, yd1
        ts = rng.uniform(0.1, 1.5)
        tau = rng.uniform(0.0, ts)
        s = seg(nodes[0], nodes[2], nodes[1], nodes[3], ts)
        traj = SplineTrajectory((s,))
        value, rate = eval_trajectory(traj, tau)
        assert abs(hermite_weights(tau, ts) @ nodes - value) <= 1e-10
        assert abs(hermite_rate_weights(tau, ts) @ nodes - rate) <= 1e-9


def _random_trajectory(rng, n_segments=None):
    n = n_segments or int(rng.integers(1, 5))
    values = rng.normal(size=n + 1)
    rates = rng.normal(size=n + 1)
    durations = rng.uniform(0.2, 1.0, size=n)
    segs = tuple(
        HermiteSegment(values[k], values[k + 1], rates[k], rates[k + 1], durations[k])
        for k in range(n)
    )
    return SplineTrajectory(segs, t0=float(rng.normal()))


def _rebuild_with_duration(traj, k, ts):
    segs = list(traj.segments)
    s = segs[k]
    segs[k] = HermiteSegment(s.y0, s.y1, s.ydot0, s.ydot1, ts, s.kind)
    return SplineTrajectory(tuple(segs), traj.t0)


def test_duration_derivative_earlier_time_is_zero():
    rng = np.random.default_rng(2)
    traj = _random_trajectory(rng, n_segments=3)
    t = traj.t0 + 0.5 * traj.segments[0].duration
    assert d_eval_d_duration(traj, t, 2) == 0.0


def test_duration_derivative_constant_segment_is_zero():
    s = seg(1.3, 1.3, 0.0, 0.0, 0.5)
    traj = SplineTrajectory((s,))
    assert d_eval_d_duration(traj, traj.t0 + 0.2, 0) == 0.0


def test_duration_derivative_matches_finite_differences():
    rng = np.random.default_rng(3)
    step = 1e-6
    count = 0
    while count < 1000:
        traj = _random_trajectory(rng)
        n = len(traj.segments)
        k = int(rng.integers(0, n))
        t = float(rng.uniform(traj.t0, traj.t_end))
        starts = traj.segment_starts()
        bounds = starts + [traj.t_end]
        if min(abs(t - b) for b in bounds) < 1e-4:
            continue  # keep the finite difference away from junction kinks
        analytic = d_eval_d_duration(traj, t, k)
        ts = traj.segments[k].duration
        up, _ = eval_trajectory(_rebuild_with_duration(traj, k, ts + step), t)
        dn, _ = eval_trajectory(_rebuild_with_duration(traj, k, ts - step), t)
        fd = (up - dn) / (2 * step)
        assert abs(analytic - fd) <= 1e-6 * max(1.0, abs(fd))
        count += 1


def test_value_continuity_enforced():
    with pytest.raises(ValueError):
        SplineTrajectory((seg(0.0, 1.0, 0.0, 0.0, 1.0), seg(0.5, 0.0, 0.0, 0.0, 1.0)))
    with pytest.raises(ValueError):
        SplineTrajectory(
            (seg(0.0, 1.0, 0.0, 0.0, 1.0), seg(0.0, 0.0, 0.0, 0.0, 1.0, SegmentKind.ZERO_FORCE))
        )


def test_sample_rows_shape():
    traj = SplineTrajectory((seg(0.0, 1.0, 0.0, 0.0, 1.0),), t0=2.0)
    rows = sample_rows(traj, [2.0, 2.5, 3.0], "leg0_fz")
    assert len(rows) == 3
    assert rows[0][0] == "leg0_fz"
    assert rows[1][2] == pytest.approx(0.5)
