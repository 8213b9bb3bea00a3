import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nmglab.schedule import ConfigError, coeffs, coeffs_from_alphabar, make_schedule

mpmath.mp.dps = 50


def mp_alphabar(n, lo, hi, k):
    lo, hi = mpmath.mpf(lo), mpmath.mpf(hi)
    prod = mpmath.mpf(1)
    for j in range(k):
        beta = lo + (hi - lo) * j / (n - 1)
        prod *= 1 - beta
    return prod


def mp_coeffs(ab_from, ab_to):
    f, t = mpmath.mpf(ab_from), mpmath.mpf(ab_to)
    a = mpmath.sqrt(t / f)
    b = mpmath.sqrt(t) * (mpmath.sqrt(1 / t - 1) - mpmath.sqrt(1 / f - 1))
    return a, b


def test_alphabar_starts_at_one(sched):
    assert sched.alphabar[0] == 1.0


def test_alphabar_strictly_decreasing(sched):
    assert np.all(np.diff(sched.alphabar) < 0)
    assert np.all((sched.alphabar > 0) & (sched.alphabar <= 1))


def test_alphabar_matches_high_precision_product(sched):
    ref = mp_alphabar(1000, "1e-4", "0.02", 1000)
    assert abs(sched.alphabar[1000] - float(ref)) / float(ref) < 1e-12


def test_ladder(sched):
    assert sched.ladder[0] == 0
    assert len(sched.ladder) == 51
    assert np.all(np.diff(sched.ladder) > 0)
    assert sched.ladder[-1] <= 1000
    assert list(sched.ladder[:3]) == [0, 20, 40]


@pytest.mark.parametrize("args", [(0, 0, 1e-4, 0.02), (10, 20, 1e-4, 0.02), (100, 10, 0.0, 0.02),
                                  (100, 10, 0.03, 0.02), (100, 10, 1e-4, 1.0)])
def test_invalid_schedules(args):
    with pytest.raises(ConfigError):
        make_schedule(*args)


def test_degenerate_equal_noise():
    c = coeffs_from_alphabar(0.3, 0.3)
    assert c.a == 1.0 and c.b == 0.0


def test_closed_form_coeffs():
    c = coeffs_from_alphabar(0.25, 1.0)
    assert c.a == 2.0
    assert c.b == pytest.approx(-np.sqrt(3), rel=1e-15)


@given(st.floats(1e-4, 1.0), st.floats(1e-4, 1.0))
def test_coeffs_match_high_precision(ab_from, ab_to):
    c = coeffs_from_alphabar(ab_from, ab_to)
    a, b = mp_coeffs(ab_from, ab_to)
    assert abs(c.a - float(a)) <= 1e-12 * abs(float(a))
    assert abs(c.b - float(b)) <= 1e-12 * max(abs(float(b)), 1e-300) or abs(c.b - float(b)) < 1e-15


def test_non_adjacent_rungs_rejected(sched):
    with pytest.raises(ValueError):
        coeffs(sched, 5, 3)
    with pytest.raises(ValueError):
        coeffs(sched, 50, 51)


def test_reverse_then_inversion_coefficients_cancel(sched):
    for t in range(1, sched.T + 1):
        rev, inv = coeffs(sched, t, t - 1), coeffs(sched, t - 1, t)
        assert abs(rev.a * inv.a - 1) < 1e-12
        assert abs(inv.a * rev.b + inv.b) < 1e-12


def test_schedule_round_trips_through_dict(sched):
    s2 = type(sched).from_dict(sched.to_dict())
    assert np.array_equal(s2.alphabar, sched.alphabar)
    assert np.array_equal(s2.ladder, sched.ladder)
