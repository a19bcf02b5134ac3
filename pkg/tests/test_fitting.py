import numpy as np
import pytest

from kinetic_cycles.fitting import (
    FitError, fit_power_law, linear_fit, local_slopes, spread, tail_fits, tails_consistent,
)


def test_exact_power_law():
    x = np.logspace(-6, -1, 12)
    fit = fit_power_law(x, 3.0 * x ** -0.75)
    assert fit.exponent == pytest.approx(-0.75, abs=1e-12)
    assert fit.intercept == pytest.approx(np.log10(3.0), abs=1e-12)
    assert fit.r2 == pytest.approx(1.0)
    assert fit.points == 12
    assert fit.alpha_range == pytest.approx((1e-6, 1e-1))
    assert fit.within(-0.7, 0.1)
    assert not fit.within(-0.5, 0.1)


def test_invalid_points_are_dropped():
    x = np.array([0.0, -1.0, np.nan, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0])
    y = np.array([1.0, 1.0, 1.0, 1e-3, 1e-2, 1e-1, 1.0, 10.0, np.inf])
    fit = fit_power_law(x, y, min_points=5)
    assert fit.points == 5
    assert fit.exponent == pytest.approx(1.0)


def test_too_few_points():
    with pytest.raises(FitError):
        fit_power_law([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    with pytest.raises(FitError):
        fit_power_law(np.logspace(-3, 0, 10), np.logspace(-3, 0, 10), x_range=(1e-1, 1.0))


def test_local_slopes_sort_by_x():
    x = np.array([1.0, 0.01, 0.1])
    np.testing.assert_allclose(local_slopes(x, x ** 2), [2.0, 2.0])


def test_tail_fits_tighten_toward_zero():
    x = np.logspace(-8, -1, 20)
    fits = tail_fits(x, x ** -0.5)
    assert [fit.points for fit in fits] == [20, 13, 6]
    assert all(fit.exponent == pytest.approx(-0.5, abs=1e-10) for fit in fits)
    assert tails_consistent(fits, 0.05)


def test_tails_inconsistent_when_the_slope_rises():
    x = np.logspace(-8, -1, 20)
    # steeper blow-up below 1e-5
    y = x ** -0.5 * np.where(x < 1e-5, 1e-5 / x, 1.0) ** 0.5
    fits = tail_fits(x, y)
    assert fits[-1].exponent < fits[0].exponent
    assert tails_consistent(fits, 0.05)
    assert not tails_consistent(fits[::-1], 0.05)


def test_linear_fit():
    fit = linear_fit([0.0, 1.0, 2.0, 3.0], [1.0, 3.0, 5.0, 7.0])
    assert fit.slope == pytest.approx(2.0)
    assert fit.intercept == pytest.approx(1.0)
    assert fit.slope_stderr == pytest.approx(0.0, abs=1e-12)


def test_spread():
    assert spread([2.0, 4.0, np.nan, -1.0, 0.0]) == pytest.approx(2.0)
    assert spread([]) == np.inf
