import math
from types import SimpleNamespace

import numpy as np
import pytest

from kinetic_cycles import nonlocal_estimates
from kinetic_cycles.collision import ParameterViolation
from kinetic_cycles.geometry import Disk2D, PhaseState, Sphere
from kinetic_cycles.kinetic_distance import GrazingDegenerate
from kinetic_cycles.nonlocal_estimates import (
    NonlocalParams, calibrate_decay_rate, dynamical_nonlocal_integral, grazing_u_integral, interior_point,
    nonlocal_u_variant, segment_additivity_residual, trajectory_segments, u_integral_at, u_integral_scan,
)
from kinetic_cycles.trajectories import BOUNCE_BACK, SPECULAR, BoundaryCondition, build_cycle

# no bounce on [0, t]: the chord from the center reaches the boundary after time 1
FREE_STATE = PhaseState(0.3, np.zeros(3), np.array([1.0, 0.0, 0.0]))
COARSE = dict(radial_nodes=8, angular_nodes=8, time_nodes=3)


@pytest.mark.parametrize("kwargs", [{"beta": 0.5}, {"beta": 1.5}, {"theta": 0.0}])
def test_params_validation(kwargs):
    with pytest.raises(ParameterViolation):
        NonlocalParams(**kwargs)


def test_interior_point_depth():
    sphere = Sphere(1.0)
    point = interior_point(sphere, 1e-4, axis=(0.0, 3.0, 4.0))
    assert sphere.xi(point) == pytest.approx(-1e-4, rel=1e-9)
    np.testing.assert_allclose(point / np.linalg.norm(point), [0.0, 0.6, 0.8])


def test_trajectory_segments_of_the_diameter_cycle():
    cycle = build_cycle(Sphere(1.0), SPECULAR, PhaseState(3.0, np.zeros(3), np.array([1.0, 0.0, 0.0])), s_min=0.0)
    segments = trajectory_segments(cycle)
    assert [(segment.lower, segment.upper) for segment in segments] == [(2.0, 3.0), (0.0, 2.0)]
    assert segments[0].singular_lower and not segments[0].singular_upper
    assert segments[1].full


def test_velocity_integral_needs_an_interior_point_in_3d():
    params = NonlocalParams()
    with pytest.raises(ValueError):
        u_integral_at(Sphere(1.0), [1.0, 0.0, 0.0], [1.0, 0.0, 0.0], params, 8, 8)
    with pytest.raises(ValueError):
        u_integral_at(Disk2D(1.0), [0.5, 0.0], [1.0, 0.0], params, 8, 8)


def test_velocity_integral_is_positive_and_converges():
    params = NonlocalParams(beta=0.75, rtol=5e-2)
    X = interior_point(Sphere(1.0), 1e-2)
    coarse = u_integral_at(Sphere(1.0), X, [0.6, 0.0, 0.8], params, 16, 16)
    fine = u_integral_at(Sphere(1.0), X, [0.6, 0.0, 0.8], params, 32, 32)
    assert coarse > 0
    assert fine == pytest.approx(coarse, rel=5e-2)
    result = grazing_u_integral(Sphere(1.0), X, np.array([0.6, 0.0, 0.8]), params)
    assert result.xi == pytest.approx(-1e-2)
    assert result.ratio == pytest.approx(result.value * 1e-2 ** 0.25)


def test_trajectory_integral_without_bounces():
    params = NonlocalParams(beta=0.75, **COARSE)
    result = dynamical_nonlocal_integral(Sphere(1.0), SPECULAR, FREE_STATE, params)
    assert result.segments == 1
    assert result.details["bounces"] == 0
    assert result.lhs > 0
    assert result.ratio == pytest.approx(result.lhs / result.rhs_scale)
    # alpha(0, e_1) = 4 on the unit sphere
    assert result.alpha == pytest.approx(4.0)
    assert result.rhs_scale == pytest.approx(1.0 / (math.sqrt(2.0) * 4.0 ** 0.25))


def test_test_weight_scales_the_integral():
    plain = dynamical_nonlocal_integral(Sphere(1.0), SPECULAR, FREE_STATE, NonlocalParams(beta=0.75, **COARSE))
    weighted = dynamical_nonlocal_integral(Sphere(1.0), SPECULAR, FREE_STATE,
                                           NonlocalParams(beta=0.75, z=lambda s: 2.0, **COARSE))
    assert weighted.lhs == pytest.approx(2.0 * plain.lhs, rel=1e-12)


def test_clamped_variant_is_the_plain_integral():
    params = NonlocalParams(beta=1.25, **COARSE)
    clamped = nonlocal_u_variant(Sphere(1.0), SPECULAR, FREE_STATE, params, clamp=True)
    plain = dynamical_nonlocal_integral(Sphere(1.0), SPECULAR, FREE_STATE, params)
    assert clamped.lhs == plain.lhs
    with pytest.raises(ParameterViolation):
        nonlocal_u_variant(Sphere(1.0), SPECULAR, FREE_STATE, params)


def test_trajectory_integral_rejects_diffuse_and_grazing_states():
    params = NonlocalParams(**COARSE)
    with pytest.raises(TypeError):
        dynamical_nonlocal_integral(Sphere(1.0), BoundaryCondition.from_name("diffuse"), FREE_STATE, params)
    grazing = PhaseState(1.0, np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))
    with pytest.raises(GrazingDegenerate):
        dynamical_nonlocal_integral(Sphere(1.0), SPECULAR, grazing, params)


@pytest.mark.slow
@pytest.mark.parametrize("bc", [SPECULAR, BOUNCE_BACK])
def test_splitting_segments_barely_changes_the_integral(bc):
    state = PhaseState(2.5, np.array([0.2, 0.1, 0.0]), np.array([0.6, -0.8, 0.0]))
    params = NonlocalParams(beta=0.75)
    assert segment_additivity_residual(Sphere(1.0), bc, state, params) < 0.05


@pytest.mark.slow
def test_velocity_integral_blows_up_like_a_power_of_the_depth():
    params = NonlocalParams(beta=1.0, rtol=1e-2)
    rows, fit = u_integral_scan(Sphere(1.0), params, [1e-3, 1e-4, 1e-5, 1e-6])
    assert len(rows) == 4
    assert fit.exponent == pytest.approx(0.5 - params.beta, abs=0.1)


# ---------------------------------------------------------------------------- #
#                            Decay rate calibration                            #
# ---------------------------------------------------------------------------- #

def test_flat_ratio_spread_keeps_the_starting_rate():
    params = NonlocalParams(beta=0.75, **COARSE)
    assert calibrate_decay_rate(Sphere(1.0), SPECULAR, [FREE_STATE], params, start=10.0) == 10.0


def test_calibration_doubles_until_the_spread_settles(monkeypatch):
    seen = []

    def ratios(domain, bc, state, params):
        seen.append(params.decay_rate)
        return SimpleNamespace(ratio=1.0 + 8.0 / params.decay_rate if state.t < 0.25 else 1.0)

    monkeypatch.setattr(nonlocal_estimates, "dynamical_nonlocal_integral", ratios)
    states = [FREE_STATE, FREE_STATE.replace(t=0.2)]
    # spreads 1.8, 1.4, 1.2, 1.1, 1.05: the last step changes by less than 5 %
    rate = calibrate_decay_rate(Sphere(1.0), SPECULAR, states, NonlocalParams(), start=10.0, tolerance=0.05)
    assert rate == 80.0
    assert max(seen) == 160.0


def test_unsettled_calibration_returns_the_last_rate(monkeypatch, caplog):
    monkeypatch.setattr(nonlocal_estimates, "dynamical_nonlocal_integral",
                        lambda domain, bc, state, params: SimpleNamespace(ratio=1.0 + params.decay_rate * state.t))
    states = [FREE_STATE, FREE_STATE.replace(t=0.0)]
    rate = calibrate_decay_rate(Sphere(1.0), SPECULAR, states, NonlocalParams(), start=1.0, max_doublings=3)
    assert rate == 8.0
    assert "did not stabilize" in caplog.text
