import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kinetic_cycles.geometry import Disk2D, Ellipsoid, PhaseState, QuarticBall, Sphere, exit_times, outward_normal
from kinetic_cycles.trajectories import (
    BOUNCE_BACK, SPECULAR, STALL_TIME, AtBounceTime, BounceCapExceeded, BoundaryCondition, BoundaryKind,
    CenterDegenerate, DiffuseLaw, GrazingStall, bounce_count, bounce_gaps, build_cycle, disk_polar, disk_specular_cycle,
    eval_trajectory, exact_gap, flux_velocity, sample_diffuse_velocity, semigroup_defect, specular_reflection,
)

DIAMETER_STATE = PhaseState(3.0, np.zeros(3), np.array([1.0, 0.0, 0.0]))


def test_boundary_condition_from_name():
    assert BoundaryCondition.from_name("bounce_back").kind == BoundaryKind.BOUNCE_BACK
    assert BoundaryCondition.from_name("Diffuse", seed=4) == BoundaryCondition(BoundaryKind.DIFFUSE, seed=4)
    assert not BoundaryCondition.from_name("diffuse").is_deterministic
    with pytest.raises(ValueError):
        BoundaryCondition.from_name("absorbing")


# ---------------------------------------------------------------------------- #
#                                Specular cycles                               #
# ---------------------------------------------------------------------------- #

@pytest.mark.parametrize("method", ["auto", "iterative"])
def test_sphere_diameter_cycle(method):
    cycle = build_cycle(Sphere(1.0), SPECULAR, DIAMETER_STATE, s_min=0.0, method=method)
    assert cycle.bounces == 2
    np.testing.assert_allclose(cycle.times, [3.0, 2.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(cycle.positions[1:], [[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]], atol=1e-12)
    np.testing.assert_allclose(cycle.velocities, [[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]], atol=1e-12)


def test_evaluate_on_the_diameter_cycle():
    cycle = build_cycle(Sphere(1.0), SPECULAR, DIAMETER_STATE, s_min=0.0)
    x, v = eval_trajectory(cycle, 3.0)
    np.testing.assert_array_equal(x, DIAMETER_STATE.x)
    x, v = cycle.evaluate(1.0)
    assert x == pytest.approx([0.0, 0.0, 0.0], abs=1e-12)
    assert v == pytest.approx([-1.0, 0.0, 0.0], abs=1e-12)
    x, v = cycle.evaluate(2.5)
    np.testing.assert_array_equal(x, [-0.5, 0.0, 0.0])
    with pytest.raises(AtBounceTime):
        cycle.evaluate(2.0)
    with pytest.raises(ValueError):
        cycle.evaluate(3.5)


@pytest.mark.parametrize("s, expected", [(2.5, 0), (0.5, 1), (1e-9, 1)])
def test_bounce_count(s, expected):
    cycle = build_cycle(Sphere(1.0), SPECULAR, DIAMETER_STATE, s_min=0.0)
    assert bounce_count(cycle, s).ell_star == expected


def test_bounce_count_ratio_on_the_sphere():
    cycle = build_cycle(Sphere(1.0), SPECULAR, DIAMETER_STATE, s_min=0.0)
    # alpha = 4 at the center with unit speed, no exponential factor on quadrics
    assert bounce_count(cycle, 0.5).ratio == pytest.approx(1 * 2.0 / 2.5)


def test_disk_example_first_bounce_and_gap():
    state = PhaseState(1.0, np.array([0.5, 0.0]), np.array([0.0, 1.0]))
    cycle = disk_specular_cycle(state, s_min=-3.0)
    assert cycle.times[1] == pytest.approx(1.0 - math.sqrt(0.75), abs=1e-14)
    assert cycle.times[2] - cycle.times[1] == pytest.approx(-2.0 * math.sqrt(0.75), abs=1e-14)
    assert cycle.notes["absolute_branch_matches"]


def test_disk_grazing_limit_shortens_the_first_flight():
    flights = []
    for epsilon in (1e-2, 1e-4, 1e-6):
        r = 1.0 - epsilon
        cycle = disk_specular_cycle(PhaseState(1.0, np.array([r, 0.0]), np.array([0.0, 1.0])), s_min=0.0)
        flights.append(cycle.t - cycle.times[1])
    assert flights[0] > flights[1] > flights[2]
    assert flights[2] < 1e-2


def test_disk_polar_data():
    polar = disk_polar(PhaseState(0.0, np.array([0.0, 0.5]), np.array([1.0, 1.0])))
    assert polar.r == pytest.approx(0.5)
    assert polar.theta == pytest.approx(math.pi / 2)
    assert polar.v_n == pytest.approx(1.0)
    assert polar.v_theta == pytest.approx(-1.0)
    assert polar.chord2 == pytest.approx(0.25 + 2.0 * 0.75)
    with pytest.raises(CenterDegenerate):
        disk_polar(PhaseState(0.0, np.zeros(2), np.array([1.0, 0.0])))


def test_negative_normal_branch_is_flagged(caplog):
    cycle = disk_specular_cycle(PhaseState(1.0, np.array([0.5, 0.0]), np.array([-1.0, 0.3])), s_min=0.0)
    assert not cycle.notes["absolute_branch_matches"]
    assert "v_n" in caplog.text


def _disk_states(count, seed):
    rng = np.random.default_rng(seed)
    radii = np.sqrt(rng.uniform(0.01, 1.0, count)) * 0.999
    angles = rng.uniform(0, 2 * math.pi, count)
    headings = rng.uniform(0, 2 * math.pi, count)
    for r, angle, heading in zip(radii, angles, headings):
        x = r * np.array([math.cos(angle), math.sin(angle)])
        v = np.array([math.cos(heading), math.sin(heading)])
        if x @ v < 0:
            v = -v
        yield PhaseState(0.0, x, v)


@pytest.mark.parametrize("state", list(_disk_states(20, seed=3)))
def test_closed_form_disk_cycle_matches_iteration(state):
    analytic = disk_specular_cycle(state, ell_max=100)
    iterative = build_cycle(Disk2D(1.0), SPECULAR, state, s_min=analytic.s_min, method="iterative")
    assert iterative.bounces == analytic.bounces == 100
    np.testing.assert_allclose(iterative.times, analytic.times, atol=1e-8)
    np.testing.assert_allclose(iterative.positions, analytic.positions, atol=1e-8)
    np.testing.assert_allclose(iterative.velocities, analytic.velocities, atol=1e-8)


def test_closed_form_ball_cycle_matches_iteration(rng, interior_state):
    for _ in range(10):
        x, v = interior_state(Sphere(1.0), rng, speed=1.5)
        state = PhaseState(4.0, x, v)
        analytic = build_cycle(Sphere(1.0), SPECULAR, state, s_min=0.0)
        iterative = build_cycle(Sphere(1.0), SPECULAR, state, s_min=0.0, method="iterative")
        assert analytic.notes["method"] == "analytic"
        assert analytic.bounces == iterative.bounces
        np.testing.assert_allclose(analytic.positions, iterative.positions, atol=1e-9)


@pytest.mark.parametrize("domain", [Sphere(1.0), Ellipsoid(), QuarticBall(0.1)])
def test_specular_cycles_conserve_speed_and_stay_on_the_boundary(domain, rng, interior_state):
    for _ in range(10):
        x, v = interior_state(domain, rng, speed=2.0)
        cycle = build_cycle(domain, SPECULAR, PhaseState(5.0, x, v), s_min=0.0)
        speeds = np.linalg.norm(cycle.velocities, axis=-1)
        np.testing.assert_allclose(speeds, 2.0, rtol=1e-12)
        assert np.max(np.abs(domain.xi(cycle.positions[1:])), initial=0.0) <= 1e-9
        assert np.all(np.diff(cycle.times) < 0)
        # reflected velocities point back into the domain going backward
        normals = outward_normal(domain, cycle.positions[1:])
        assert np.all(np.sum(normals * cycle.velocities[1:], axis=-1) >= -1e-12)


def test_specular_reflection_is_an_involution(rng):
    normals = rng.standard_normal((20, 3))
    normals /= np.linalg.norm(normals, axis=-1, keepdims=True)
    v = rng.standard_normal((20, 3))
    np.testing.assert_allclose(specular_reflection(normals, specular_reflection(normals, v)), v, atol=1e-14)


@given(t=st.floats(min_value=0.5, max_value=4.0), s_fraction=st.floats(min_value=0.05, max_value=0.95),
       s_prime_fraction=st.floats(min_value=0.0, max_value=0.95))
@settings(max_examples=30)
def test_semigroup_property(t, s_fraction, s_prime_fraction):
    domain = QuarticBall(0.1)
    state = PhaseState(t, np.array([0.1, -0.2, 0.3]), np.array([0.7, 0.4, -0.6]))
    cycle = build_cycle(domain, SPECULAR, state, s_min=0.0)
    s = s_fraction * t
    s_prime = s_prime_fraction * s
    try:
        defect = semigroup_defect(cycle, s, s_prime)
    except AtBounceTime:
        return
    assert defect <= 1e-9


def test_bounce_cap_carries_the_partial_cycle():
    with pytest.raises(BounceCapExceeded) as info:
        build_cycle(Sphere(1.0), SPECULAR, DIAMETER_STATE.replace(t=100.0), s_min=0.0, bounce_cap=5)
    assert info.value.partial is not None
    assert info.value.partial.truncated


def test_horizon_above_the_start_is_rejected():
    with pytest.raises(ValueError):
        build_cycle(Sphere(1.0), SPECULAR, DIAMETER_STATE, s_min=4.0)


# ---------------------------------------------------------------------------- #
#                              Bounce-back cycles                              #
# ---------------------------------------------------------------------------- #

def test_bounce_back_disk_example():
    state = PhaseState(2.0, np.array([0.5, 0.0]), np.array([0.0, 1.0]))
    cycle = build_cycle(Disk2D(1.0), BOUNCE_BACK, state, s_min=-2.0)
    root = math.sqrt(0.75)
    assert cycle.times[1] == pytest.approx(2.0 - root)
    assert cycle.times[2] == pytest.approx(2.0 - 3.0 * root)
    assert cycle.positions[1] == pytest.approx([0.5, -root])
    assert cycle.positions[2] == pytest.approx([0.5, root])
    np.testing.assert_array_equal(cycle.velocities[2], state.v)
    np.testing.assert_array_equal(cycle.velocities[1], -state.v)


@pytest.mark.parametrize("domain", [Sphere(1.0), QuarticBall(0.1)])
def test_bounce_back_alternates(domain, rng, interior_state):
    x, v = interior_state(domain, rng)
    cycle = build_cycle(domain, BOUNCE_BACK, PhaseState(6.0, x, v), s_min=0.0)
    assert cycle.bounces >= 2
    np.testing.assert_array_equal(cycle.positions[1::2], np.broadcast_to(cycle.positions[1], cycle.positions[1::2].shape))
    np.testing.assert_array_equal(cycle.positions[2::2], np.broadcast_to(cycle.positions[2], cycle.positions[2::2].shape))
    signs = np.where(np.arange(cycle.bounces + 1) % 2 == 0, 1.0, -1.0)
    np.testing.assert_array_equal(cycle.velocities, signs[:, None] * v)


def test_bounce_back_matches_iteration(quartic, rng, interior_state):
    x, v = interior_state(quartic, rng)
    state = PhaseState(5.0, x, v)
    closed = build_cycle(quartic, BOUNCE_BACK, state, s_min=0.0)
    stepped = build_cycle(quartic, BOUNCE_BACK, state, s_min=0.0, method="iterative")
    assert closed.bounces == stepped.bounces
    np.testing.assert_allclose(closed.times, stepped.times, atol=1e-10)


# ---------------------------------------------------------------------------- #
#                                Boundary starts                               #
# ---------------------------------------------------------------------------- #

QUARTIC_EDGE = np.array([math.sqrt((math.sqrt(1.4) - 1.0) / 0.2), 0.0, 0.0])


@pytest.mark.parametrize("domain, x, v", [
    (Sphere(1.0), [1.0, 0.0, 0.0], [-1.0, 0.3, 0.0]),
    (Disk2D(1.0), [1.0, 0.0], [-1.0, 0.3]),
    (QuarticBall(0.1), QUARTIC_EDGE, [-1.0, 0.3, 0.0]),
])
@pytest.mark.parametrize("bc", [SPECULAR, BOUNCE_BACK, BoundaryCondition(BoundaryKind.DIFFUSE, seed=2)])
@pytest.mark.parametrize("method", ["auto", "iterative"])
def test_incoming_boundary_start_has_no_duplicate_bounce(domain, x, v, bc, method):
    state = PhaseState(0.0, np.array(x), np.array(v))
    cycle = build_cycle(domain, bc, state, s_min=-2.0, method=method)
    assert cycle.bounces >= 1 or bc.kind == BoundaryKind.DIFFUSE
    assert np.all(np.diff(cycle.times) < 0)
    np.testing.assert_array_equal(cycle.notes["incoming_velocity"], state.v)
    normal = outward_normal(domain, state.x)
    assert normal @ cycle.velocities[0] > 0
    if bc == SPECULAR:
        np.testing.assert_allclose(cycle.velocities[0], specular_reflection(normal, state.v), atol=1e-15)
    elif bc == BOUNCE_BACK:
        np.testing.assert_array_equal(cycle.velocities[0], -state.v)


def test_outgoing_boundary_start_is_left_alone():
    state = PhaseState(0.0, np.array([1.0, 0.0, 0.0]), np.array([1.0, 0.3, 0.0]))
    cycle = build_cycle(Sphere(1.0), SPECULAR, state, s_min=-2.0)
    assert "incoming_velocity" not in cycle.notes
    np.testing.assert_array_equal(cycle.velocities[0], state.v)
    assert cycle.times[1] < 0.0


def test_disk_closed_form_reflects_an_incoming_start():
    state = PhaseState(0.0, np.array([1.0, 0.0]), np.array([-1.0, 0.3]))
    cycle = disk_specular_cycle(state, ell_max=5)
    assert np.all(np.diff(cycle.times) < 0)
    np.testing.assert_allclose(cycle.velocities[0], [1.0, 0.3])
    np.testing.assert_array_equal(cycle.notes["incoming_velocity"], state.v)


@pytest.mark.parametrize("domain, x, v", [
    (Sphere(1.0), [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]),
    (Disk2D(1.0), [1.0, 0.0], [0.0, 1.0]),
])
def test_grazing_boundary_start_stalls(domain, x, v):
    with pytest.raises(GrazingStall):
        build_cycle(domain, SPECULAR, PhaseState(0.0, np.array(x), np.array(v)), s_min=-1.0)


def test_boundary_start_exit_time_skips_the_trivial_root(quartic):
    """Backward rays from the boundary into the domain exit on the far side of the chord."""
    v = np.array([1.0, 0.3, 0.2])
    t_b = float(exit_times(quartic, QUARTIC_EDGE, v))
    assert t_b > 0.5
    assert abs(quartic.xi(QUARTIC_EDGE - t_b * v)) < 1e-10


@pytest.mark.parametrize("bc", [SPECULAR, BoundaryCondition(BoundaryKind.DIFFUSE, seed=9)])
def test_long_quartic_cycles_never_re_hit_the_same_point(quartic, bc):
    state = PhaseState(0.0, QUARTIC_EDGE, np.array([-0.7, 0.6, 0.3]))
    cycle = build_cycle(quartic, bc, state, s_min=-60.0, method="iterative")
    assert cycle.bounces > 10
    assert np.all(-np.diff(cycle.times) > STALL_TIME)


# ---------------------------------------------------------------------------- #
#                                 Gap law                                      #
# ---------------------------------------------------------------------------- #

def test_disk_gaps_are_twice_the_grazing_ratio():
    state = PhaseState(0.0, np.array([0.3, 0.2]), np.array([0.6, 0.8]))
    cycle = disk_specular_cycle(state, ell_max=30)
    gaps, ratios = bounce_gaps(cycle)
    np.testing.assert_allclose(gaps / ratios, 2.0, rtol=1e-12)


# ---------------------------------------------------------------------------- #
#                                Diffuse cycles                                #
# ---------------------------------------------------------------------------- #

def test_flux_velocities_point_inward_backward():
    law = DiffuseLaw(3)
    normals = np.tile([0.0, 0.0, 1.0], (50_000, 1))
    v = sample_diffuse_velocity(law, normals, np.random.default_rng(0))
    normal_speed = v[:, 2]
    assert np.all(normal_speed > 0)
    assert np.all(np.isfinite(v))
    # E[n.v] = sqrt(pi/2) under the flux law
    stderr = normal_speed.std(ddof=1) / math.sqrt(normal_speed.size)
    assert abs(normal_speed.mean() - math.sqrt(math.pi / 2)) <= 4 * stderr
    # tangential parts are standard normal
    assert v[:, 0].std() == pytest.approx(1.0, abs=0.02)


def test_flux_velocity_is_deterministic_in_its_draws():
    n = np.array([0.0, 1.0])
    first = flux_velocity(n, np.array([0.3, -0.4]), 0.25)
    assert first[1] == pytest.approx(math.sqrt(-2.0 * math.log(0.75)))
    assert first[0] == pytest.approx(0.3)


def test_flux_density_normalization():
    law = DiffuseLaw(2)
    assert law.c_mu == pytest.approx((2 * math.pi) ** -0.5)
    # integral over the half plane of c_mu mu(u) (n.u) du is 1
    grid = np.linspace(-8, 8, 801)
    u1, u2 = np.meshgrid(grid, grid, indexing="ij")
    u = np.stack([u1, u2], axis=-1)
    total = np.sum(law.flux_density(u, np.array([0.0, 1.0]))) * (grid[1] - grid[0]) ** 2
    assert total == pytest.approx(1.0, rel=1e-4)


def test_diffuse_cycles_are_reproducible_and_keyed():
    domain = Sphere(1.0)
    state = PhaseState(3.0, np.zeros(3), np.array([0.0, 0.0, 1.0]))
    first = build_cycle(domain, BoundaryCondition(BoundaryKind.DIFFUSE, seed=5), state, s_min=0.0)
    again = build_cycle(domain, BoundaryCondition(BoundaryKind.DIFFUSE, seed=5), state, s_min=0.0)
    other = build_cycle(domain, BoundaryCondition(BoundaryKind.DIFFUSE, seed=5, trajectory_id=1), state, s_min=0.0)
    np.testing.assert_array_equal(first.velocities, again.velocities)
    assert first.bounces >= 1
    assert not np.array_equal(first.velocities[1], other.velocities[1])
    normals = outward_normal(domain, first.positions[1:])
    assert np.all(np.sum(normals * first.velocities[1:], axis=-1) > 0)


def test_exact_gap_cancels_round_off():
    x = np.array([0.6, 0.8])
    assert abs(exact_gap(1.0, x)) < 1e-15
