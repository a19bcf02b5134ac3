import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kinetic_cycles.geometry import Disk2D, Ellipsoid, OutsideDomain, PhaseState, QuarticBall, Sphere, sample_interior
from kinetic_cycles.kinetic_distance import (
    GrazingDegenerate, alpha, alpha_bound_constant, calibrate_velocity_constant, estimate_varpi, kinetic_weight,
    transport_derivative_alpha, varpi_threshold, velocity_lemma_certificate, velocity_lemma_constant, weighted_distance,
    weighted_monotonicity_excess,
)
from kinetic_cycles.trajectories import BOUNCE_BACK, SPECULAR, Cycle, build_cycle

coordinates = st.floats(min_value=-0.5, max_value=0.5, allow_nan=False)
velocities = st.floats(min_value=-2.0, max_value=2.0, allow_nan=False)


@pytest.mark.parametrize("x, v, expected", [
    ([1.0, 0.0, 0.0], [0.0, 1.0, 0.0], 0.0),
    ([1.0, 0.0, 0.0], [1.0, 0.0, 0.0], 4.0),
    ([0.5, 0.0, 0.0], [0.0, 1.0, 0.0], 3.0),
])
def test_alpha_examples(x, v, expected):
    assert alpha(Sphere(1.0), x, v) == pytest.approx(expected, abs=1e-15)


def test_alpha_is_vectorized(rng):
    domain = QuarticBall(0.1)
    x = sample_interior(domain, rng, 20)
    v = rng.standard_normal((20, 3))
    batch = alpha(domain, x, v)
    assert batch.shape == (20,)
    assert batch[7] == pytest.approx(alpha(domain, x[7], v[7]), rel=1e-14)


def test_alpha_outside_is_rejected():
    with pytest.raises(OutsideDomain):
        alpha(Sphere(1.0), [1.5, 0.0, 0.0], [1.0, 0.0, 0.0])


@given(st.tuples(coordinates, coordinates, coordinates), st.tuples(velocities, velocities, velocities))
def test_alpha_is_non_negative_and_quadratic_in_v(x, v):
    domain = QuarticBall(0.1)
    x, v = np.array(x), np.array(v)
    value = alpha(domain, x, v)
    assert value >= 0
    assert alpha(domain, x, 2.0 * v) == pytest.approx(4.0 * value, rel=1e-12, abs=1e-300)
    assert alpha(domain, x, -v) == pytest.approx(value, rel=1e-12, abs=1e-300)


@given(st.tuples(coordinates, coordinates, coordinates), st.tuples(velocities, velocities, velocities))
def test_alpha_invariant_along_free_flight_for_quadrics(x, v):
    """v.grad_x alpha vanishes when the third derivative of xi does."""
    domain = Ellipsoid(2.0, 1.0, 1.0)
    x, v = np.array(x), np.array(v)
    assert transport_derivative_alpha(domain, x, v) == 0.0
    moved = x - 0.1 * v
    if domain.xi(moved) < 0:
        scale = max(alpha(domain, x, v), 1e-12)
        assert alpha(domain, moved, v) == pytest.approx(alpha(domain, x, v), abs=1e-11 * max(scale, 1.0))


def test_transport_derivative_matches_finite_differences():
    domain = QuarticBall(0.1)
    x, v = np.array([0.5, 0.0, 0.0]), np.array([1.0, 0.0, 0.0])
    h = 1e-6
    fd = (alpha(domain, x + h * v, v) - alpha(domain, x - h * v, v)) / (2 * h)
    assert transport_derivative_alpha(domain, x, v) == pytest.approx(fd, rel=1e-6)


@pytest.mark.parametrize("domain", [Sphere(1.0), Ellipsoid(2.0, 1.0, 1.0), QuarticBall(0.0)])
def test_varpi_vanishes_for_quadratic_level_sets(domain):
    assert estimate_varpi(domain, 1000).value == 0.0


def test_varpi_is_positive_and_stable_across_seeds():
    values = [estimate_varpi(QuarticBall(0.1), 100_000, seed=seed) for seed in range(3)]
    assert all(estimate.value > 0 for estimate in values)
    assert max(e.value for e in values) <= 1.1 * min(e.value for e in values)
    assert values[0].argmax_x.shape == (3,)
    assert values[0].value == pytest.approx(1.1 * values[0].max_quotient)


def test_varpi_threshold_is_the_estimate_value():
    domain = QuarticBall(0.1)
    assert varpi_threshold(domain, 5000, seed=3) == estimate_varpi(domain, 5000, seed=3).value
    assert varpi_threshold(Sphere(1.0), 1000) == 0.0


def test_varpi_needs_samples():
    with pytest.raises(ValueError):
        estimate_varpi(QuarticBall(0.1), 0)


def test_weighted_distance():
    x, v = np.array([0.5, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])
    expected = math.exp(-2.0 * math.sqrt(2.0) * 1.5) * 3.0
    assert weighted_distance(Sphere(1.0), 1.5, x, v, varpi=2.0) == pytest.approx(expected)


@pytest.mark.parametrize("domain, constant", [
    (Sphere(1.0), 0.0), (Disk2D(1.0), 0.0), (Ellipsoid(), 0.0), (QuarticBall(0.1), 1.2), (QuarticBall(0.5), 6.0),
])
def test_velocity_lemma_constant(domain, constant):
    assert velocity_lemma_constant(domain) == pytest.approx(constant)


def test_calibrated_constant_is_a_padded_percentile():
    rates = np.linspace(0.0, 1.0, 1001)
    assert calibrate_velocity_constant(rates) == pytest.approx(1.2 * np.percentile(rates, 99.9))
    with pytest.raises(ValueError):
        calibrate_velocity_constant([np.nan, np.inf])


def test_kinetic_weight_defaults_for_quadrics():
    weight = kinetic_weight(Sphere(1.0), 1.0, [0.5, 0.0, 0.0], [0.0, 1.0, 0.0])
    assert weight.varpi == 0.0
    assert weight.vl_constant == 0.0
    assert weight.alpha == pytest.approx(3.0)
    assert weight.weighted == pytest.approx(weight.alpha)


@pytest.mark.parametrize("bc", [SPECULAR, BOUNCE_BACK])
@given(s1=st.floats(min_value=0.05, max_value=2.9), s2=st.floats(min_value=0.05, max_value=2.9))
def test_alpha_is_conserved_on_the_sphere(bc, s1, s2):
    cycle = build_cycle(Sphere(1.0), bc, PhaseState(3.0, np.array([0.2, 0.1, -0.3]), np.array([0.4, -0.8, 0.5])),
                        s_min=0.0)
    try:
        certificate = velocity_lemma_certificate(Sphere(1.0), cycle, s1, s2)
    except ValueError:
        return  # s1 or s2 at a bounce time
    assert certificate.ratio == pytest.approx(1.0, abs=1e-10)
    assert certificate.passed


def test_velocity_lemma_holds_on_the_quartic_ball(rng, interior_state):
    domain = QuarticBall(0.1)
    constant = velocity_lemma_constant(domain)
    for _ in range(50):
        x, v = interior_state(domain, rng)
        cycle = build_cycle(domain, SPECULAR, PhaseState(2.0, x, v), s_min=0.0)
        certificate = velocity_lemma_certificate(domain, cycle, 1.7, 1.2)
        assert certificate.passed
        assert certificate.implied_rate <= constant


def test_certificate_rejects_grazing_start():
    domain = Sphere(1.0)
    cycle = Cycle(domain=domain, bc=SPECULAR, times=np.array([1.0]), positions=np.array([[1.0, 0.0, 0.0]]),
                  velocities=np.array([[0.0, 1.0, 0.0]]), s_min=1.0)
    with pytest.raises(GrazingDegenerate):
        velocity_lemma_certificate(domain, cycle, 1.0, 1.0)


def test_alpha_bound_constant_for_the_sphere():
    # alpha <= 4 |v|^2 on the unit ball, attained at the boundary with normal velocity
    bound = alpha_bound_constant(Sphere(1.0), 20_000)
    assert 3.0 < bound <= 4.0 + 1e-12


def test_weighted_distance_does_not_grow_backward_above_the_threshold(rng, interior_state):
    domain = QuarticBall(0.1)
    varpi = estimate_varpi(domain, 20_000).value
    for _ in range(20):
        x, v = interior_state(domain, rng, speed=2.0)
        cycle = build_cycle(domain, SPECULAR, PhaseState(1.0, x, v), s_min=0.0)
        times = [s for s in np.linspace(0.0, 1.0, 11) if np.min(np.abs(cycle.times[1:] - s), initial=1.0) > 1e-9]
        assert weighted_monotonicity_excess(domain, cycle, varpi, times) <= 1e-9
