import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, List, Optional, Sequence

import numpy as np
from tenacity import Retrying, retry_if_exception_type, stop_after_attempt

from .config_classes import BlowupConfig
from .fitting import FitError, ScalingFit, fit_power_law
from .geometry import ConvexDomain, Disk2D, PhaseState, Sphere, exit_times, outward_normal, tangent_frame
from .jacobians import FD_SHRINKS, SegmentCrossing, disk_normal_derivatives, grazing_family
from .kinetic_distance import alpha
from .rng import stream
from .trajectories import (
    AtBounceTime, BounceCapExceeded, BoundaryCondition, BoundaryKind, DiffuseLaw, SPECULAR, build_cycle,
    flux_velocity,
)

logger = logging.getLogger(__name__)

DIFFUSE_BOUNCE_CAP = 10_000
NORMAL_SPEED_MAX = 8.0
GRADIENT_STEP = 1e-5


class Representation(str, Enum):
    """Quantity carried by f: F, F/sqrt(mu) or F/mu."""

    DENSITY = "density"
    RATIO_SQRT_MU = "ratio-sqrt-mu"
    RATIO_MU = "ratio-mu"

    @property
    def mu_power(self) -> float:
        """a in f = F / mu^a"""
        return {"density": 0.0, "ratio-sqrt-mu": 0.5, "ratio-mu": 1.0}[self.value]


@dataclass
class TransportProblem:
    """
    Free transport of f0 under a boundary condition.

    f0(x, v) is vectorized over (..., dim) arrays and given in the chosen
    representation; grad_x and grad_v are optional analytic gradients.
    """

    domain: ConvexDomain
    bc: BoundaryCondition
    f0: Callable
    representation: Representation = Representation.DENSITY
    grad_x: Optional[Callable] = None
    grad_v: Optional[Callable] = None

    @property
    def law(self) -> DiffuseLaw:
        return DiffuseLaw(self.domain.dim)

    def weight(self, v):
        """mu(v)^{1-a}: f = weight * F/mu."""
        return self.law.maxwellian(v) ** (1.0 - self.representation.mu_power)

    def ratio_datum(self, x, v):
        """F0/mu, the quantity the diffuse boundary condition averages."""
        return self.f0(x, v) / self.weight(v)

    def with_datum(self, f0: Callable, representation: Optional[Representation] = None) -> "TransportProblem":
        return TransportProblem(self.domain, self.bc, f0, representation or self.representation)


@dataclass(frozen=True)
class MonteCarloConfig:
    paths: int = 10_000
    seed: int = 0
    batch: int = 50_000
    key: tuple = ()


@dataclass
class TransportValue:
    value: float
    stderr: float = 0.0


# ---------------------------------------------------------------------------- #
#                            Diffuse path engine                               #
# ---------------------------------------------------------------------------- #

def trace_diffuse(domain: ConvexDomain, datum: Callable, remaining, x, v, seed: int, key=(),
                  law: Optional[DiffuseLaw] = None, bounce_cap: int = DIFFUSE_BOUNCE_CAP) -> np.ndarray:
    """
    datum(X(0), V(0)) along independent backward diffuse paths.

    Path i starts from (remaining[i], x[i], v[i]). Every path draws from
    the stream (seed, key, bounce) at its own index, whether or not it
    bounces, so two calls with the same key couple path by path (common
    random numbers).

    Raises:
        BounceCapExceeded: If a path is still active after bounce_cap bounces.
    """
    law = law or DiffuseLaw(domain.dim)
    x = np.array(x, dtype=float)
    v = np.array(v, dtype=float)
    n_paths = x.shape[0]
    remaining = np.broadcast_to(np.asarray(remaining, dtype=float), (n_paths,)).copy()
    values = np.zeros(n_paths)
    active = np.ones(n_paths, dtype=bool)
    for bounce in range(bounce_cap):
        if not active.any():
            return values
        t_b = np.zeros(n_paths)
        t_b[active] = exit_times(domain, x[active], v[active])
        finish = active & (t_b >= remaining)
        if finish.any():
            values[finish] = datum(x[finish] - remaining[finish, None] * v[finish], v[finish])
        active &= ~finish

        rng = stream(seed, "diffuse-path", *key, bounce)
        gaussian = rng.standard_normal(x.shape)
        uniform = rng.random(n_paths)
        if active.any():
            x[active] -= t_b[active, None] * v[active]
            remaining[active] -= t_b[active]
            normals = outward_normal(domain, x[active])
            v[active] = flux_velocity(normals, gaussian[active], uniform[active])
    if active.any():
        raise BounceCapExceeded(f"{int(active.sum())} diffuse paths exceed {bounce_cap} bounces")
    return values


def _chunks(total: int, size: int):
    for start in range(0, total, size):
        yield start // size, start, min(total, start + size)


def _path_values(problem: TransportProblem, t, x, v, mc: MonteCarloConfig) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    parts = []
    for chunk, start, stop in _chunks(mc.paths, mc.batch):
        count = stop - start
        parts.append(trace_diffuse(problem.domain, problem.ratio_datum, t, np.tile(x, (count, 1)),
                                   np.tile(v, (count, 1)), mc.seed, key=(*mc.key, chunk), law=problem.law))
    return np.concatenate(parts)


# ---------------------------------------------------------------------------- #
#                               Evaluation                                     #
# ---------------------------------------------------------------------------- #

def free_transport_eval(problem: TransportProblem, t: float, x, v, mc: Optional[MonteCarloConfig] = None
                        ) -> TransportValue:
    """
    f(t, x, v) = f0(X_cl(0), V_cl(0)) for specular and bounce-back; for
    diffuse the Monte Carlo mean of (F0/mu)(X(0), V(0)) over stochastic
    cycles, converted back to the problem's representation.

    Raises:
        BounceCapExceeded: Propagated from the cycle.
        AtBounceTime: If s = 0 is a bounce time of a deterministic cycle.
    """
    if t < 0:
        raise ValueError(f"t must be non-negative, got {t}")
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    if t == 0:
        return TransportValue(float(problem.f0(x, v)))
    if problem.bc.is_deterministic:
        cycle = build_cycle(problem.domain, problem.bc, PhaseState(t, x, v), s_min=0.0)
        point, velocity = cycle.evaluate(0.0)
        return TransportValue(float(problem.f0(point, velocity)))
    mc = mc or MonteCarloConfig()
    values = _path_values(problem, t, x, v, mc)
    weight = float(problem.weight(v))
    stderr = float(np.std(values, ddof=1) / math.sqrt(values.size)) if values.size > 1 else 0.0
    return TransportValue(weight * float(np.mean(values)), weight * stderr)


@dataclass
class PhaseGradient:
    grad_x: np.ndarray
    grad_v: np.ndarray
    stderr_x: np.ndarray
    stderr_v: np.ndarray
    step: float


def _bounce_count(problem, t, x, v) -> int:
    return build_cycle(problem.domain, problem.bc, PhaseState(t, x, v), s_min=0.0).bounces


def _gradient_stencil(problem: TransportProblem, t, x, v, h: float, mc: MonteCarloConfig):
    dim = problem.domain.dim
    point = np.concatenate([x, v])
    reference = _bounce_count(problem, t, x, v) if problem.bc.is_deterministic else None
    derivative = np.zeros(2 * dim)
    stderr = np.zeros(2 * dim)
    for k in range(2 * dim):
        shift = np.zeros(2 * dim)
        shift[k] = h
        sides = []
        for sign in (1.0, -1.0):
            z = point + sign * shift
            if problem.bc.is_deterministic:
                try:
                    if _bounce_count(problem, t, z[:dim], z[dim:]) != reference:
                        raise SegmentCrossing(f"direction {k}: bounce count changes at h = {h:.3e}")
                    sides.append(free_transport_eval(problem, t, z[:dim], z[dim:]).value)
                except AtBounceTime as e:
                    raise SegmentCrossing(f"direction {k}: {e}") from e
            else:
                sides.append(float(problem.weight(z[dim:])) * _path_values(problem, t, z[:dim], z[dim:], mc))
        difference = (np.asarray(sides[0]) - np.asarray(sides[1])) / (2.0 * h)
        derivative[k] = float(np.mean(difference))
        if np.ndim(difference) and difference.size > 1:
            stderr[k] = float(np.std(difference, ddof=1) / math.sqrt(difference.size))
    return derivative, stderr


def fd_phase_gradient(problem: TransportProblem, t: float, x, v, h: float = GRADIENT_STEP,
                      mc: Optional[MonteCarloConfig] = None) -> PhaseGradient:
    """
    Central-difference (grad_x f, grad_v f) at (t, x, v).

    Deterministic stencils must keep the number of bounces in [0, t];
    otherwise h is halved, up to 4 times. Diffuse differences pair the
    two sides path by path (common random numbers) and report the
    standard error of the paired difference.

    Raises:
        SegmentCrossing: If no admissible step was found.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    mc = mc or MonteCarloConfig()
    steps = [h]

    def attempt():
        current = steps[-1]
        steps.append(0.5 * current)
        return _gradient_stencil(problem, t, x, v, current, mc), current

    for trial in Retrying(stop=stop_after_attempt(FD_SHRINKS + 1),
                          retry=retry_if_exception_type(SegmentCrossing), reraise=True):
        with trial:
            (derivative, stderr), used = attempt()
    dim = problem.domain.dim
    return PhaseGradient(derivative[:dim], derivative[dim:], stderr[:dim], stderr[dim:], used)


def maximum_principle_excess(problem: TransportProblem, states: Sequence[PhaseState], lower: float, upper: float,
                             mc: Optional[MonteCarloConfig] = None, sigma: float = 3.0) -> float:
    """
    Largest amount by which f leaves [lower, upper] over the states,
    after allowing sigma standard errors for diffuse estimates.
    """
    excess = 0.0
    for state in states:
        result = free_transport_eval(problem, state.t, state.x, state.v, mc)
        slack = sigma * result.stderr
        excess = max(excess, result.value - upper - slack, lower - result.value - slack)
    return excess


def time_consistency_defect(problem: TransportProblem, state: PhaseState, s: float) -> float:
    """|f(t, x, v) - f(s, X_cl(s), V_cl(s))| for a deterministic boundary condition."""
    if not problem.bc.is_deterministic:
        raise TypeError("time consistency is checked for deterministic boundary conditions")
    direct = free_transport_eval(problem, state.t, state.x, state.v).value
    cycle = build_cycle(problem.domain, problem.bc, state, s_min=s)
    point, velocity = cycle.evaluate(s)
    staged = free_transport_eval(problem, s, point, velocity).value
    return abs(direct - staged)


# ---------------------------------------------------------------------------- #
#                                  Data                                        #
# ---------------------------------------------------------------------------- #

def smooth_step(z):
    """C-infinity step: 0 for z <= 0, 1 for z >= 1."""
    z = np.clip(np.asarray(z, dtype=float), 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        rising = np.where(z > 0, np.exp(-1.0 / np.where(z > 0, z, 1.0)), 0.0)
        falling = np.where(z < 1, np.exp(-1.0 / np.where(z < 1, 1.0 - z, 1.0)), 0.0)
    return rising / (rising + falling)


def bump(r):
    """phi = 1 on [0, 1/2], 0 on [7/8, inf), smooth in between."""
    return 1.0 - smooth_step((np.asarray(r, dtype=float) - 0.5) / 0.375)


def bump_datum(x, v):
    """f0(x, v) = phi(|x|) phi(|v|)"""
    return bump(np.linalg.norm(x, axis=-1)) * bump(np.linalg.norm(v, axis=-1))


def constant_datum(value: float = 1.0) -> Callable:
    def datum(x, v):
        return np.full(np.shape(np.asarray(x))[:-1], float(value))
    return datum


VELOCITY_SHIFT = np.array([0.6, 0.2])


def oscillating_datum(velocity_dependent: bool = True):
    """
    Smooth disk data with generic gradients along the grazing family.

    With velocity dependence: (1 + sin(3 x1) cos(2 x2) / 2) e^{-|v - w|^2}
    with w = (0.6, 0.2). The Maxwellian is shifted by w because with
    e^{-|v|^2} the gradient grad_v f0 is parallel to v, and d_n V is
    orthogonal to V (specular reflection conserves |V|), so the v-gradient
    term of d_n f would vanish. Without velocity dependence:
    sin(3 x1) cos(2 x2).

    Returns:
        (f0, grad_x, grad_v)
    """
    def spatial(x):
        return np.sin(3 * x[..., 0]) * np.cos(2 * x[..., 1])

    def spatial_gradient(x):
        return np.stack([3 * np.cos(3 * x[..., 0]) * np.cos(2 * x[..., 1]),
                         -2 * np.sin(3 * x[..., 0]) * np.sin(2 * x[..., 1])], axis=-1)

    if not velocity_dependent:
        return (lambda x, v: spatial(np.asarray(x, dtype=float)),
                lambda x, v: spatial_gradient(np.asarray(x, dtype=float)),
                lambda x, v: np.zeros_like(np.asarray(v, dtype=float)))

    def gaussian(v):
        return np.exp(-np.sum((v - VELOCITY_SHIFT) ** 2, axis=-1))

    def f0(x, v):
        x, v = np.asarray(x, dtype=float), np.asarray(v, dtype=float)
        return (1.0 + 0.5 * spatial(x)) * gaussian(v)

    def grad_x(x, v):
        x, v = np.asarray(x, dtype=float), np.asarray(v, dtype=float)
        return 0.5 * spatial_gradient(x) * gaussian(v)[..., None]

    def grad_v(x, v):
        x, v = np.asarray(x, dtype=float), np.asarray(v, dtype=float)
        return -2.0 * (v - VELOCITY_SHIFT) * f0(x, v)[..., None]

    return f0, grad_x, grad_v


def _datum_gradient(problem: TransportProblem, x, v, h: float = 1e-6):
    if problem.grad_x is not None and problem.grad_v is not None:
        return np.asarray(problem.grad_x(x, v)), np.asarray(problem.grad_v(x, v))
    dim = len(x)
    grad_x, grad_v = np.zeros(dim), np.zeros(dim)
    for k in range(dim):
        e = np.zeros(dim)
        e[k] = h
        grad_x[k] = (problem.f0(x + e, v) - problem.f0(x - e, v)) / (2 * h)
        grad_v[k] = (problem.f0(x, v + e) - problem.f0(x, v - e)) / (2 * h)
    return grad_x, grad_v


# ---------------------------------------------------------------------------- #
#                          Boundary L^p integral scan                          #
# ---------------------------------------------------------------------------- #

@dataclass
class BoundaryIntegral:
    p: float
    deltas: List[float]
    integrals: np.ndarray
    stderrs: np.ndarray
    slope: float
    slope_stderr: float
    cauchy_difference: float
    cauchy_stderr: float
    rows: List[dict] = field(default_factory=list)


@dataclass
class FluxAverages:
    """Flux average A(s, x) of F/mu on the boundary and its time and tangential derivatives per node."""

    times: np.ndarray
    points: np.ndarray
    frames: np.ndarray
    value: np.ndarray
    d_time: np.ndarray
    d_tangent: np.ndarray


def _rotate_on_sphere(points, frames, angle, axis_index):
    """Move each point by arc angle along its frame vector."""
    radius = np.linalg.norm(points, axis=-1, keepdims=True)
    direction = frames[:, axis_index]
    return math.cos(angle) * points + math.sin(angle) * radius * direction


def flux_averages(problem: TransportProblem, horizon: float, nodes: int, paths: int, seed: int,
                  time_step: float, angle_step: float, batch: int) -> FluxAverages:
    """
    A(s, x) = E_sigma[(F/mu)(s, x, u)] at random boundary nodes, with common
    random numbers across the time and tangential stencils.

    Nodes are s uniform on [time_step, horizon] and x uniform on the sphere.
    """
    domain = problem.domain
    if not isinstance(domain, Sphere):
        raise TypeError("boundary integrals are sampled on a sphere")
    rng = stream(seed, "lp-nodes")
    times = rng.uniform(time_step, horizon, nodes)
    directions = rng.standard_normal((nodes, domain.dim))
    points = domain.radius * directions / np.linalg.norm(directions, axis=-1, keepdims=True)
    frames = np.array([np.stack(tangent_frame(point / domain.radius)) for point in points])
    tangents = frames.shape[1]

    # (label, time shift, rotation axis, rotation sign)
    stencil = [("base", 0.0, None, 0.0), ("t+", time_step, None, 0.0), ("t-", -time_step, None, 0.0)]
    for axis in range(tangents):
        stencil += [(f"r{axis}+", 0.0, axis, 1.0), (f"r{axis}-", 0.0, axis, -1.0)]

    per_chunk = max(1, batch // paths)
    results = {label: np.zeros(nodes) for label, *_ in stencil}
    for chunk, start, stop in _chunks(nodes, per_chunk):
        count = stop - start
        draws = stream(seed, "lp-initial", chunk)
        gaussian = draws.standard_normal((count, paths, domain.dim))
        uniform = draws.random((count, paths))
        for label, shift, axis, sign in stencil:
            node_points = points[start:stop]
            if axis is not None:
                node_points = _rotate_on_sphere(node_points, frames[start:stop], sign * angle_step, axis)
            normals = node_points / np.linalg.norm(node_points, axis=-1, keepdims=True)
            u = flux_velocity(np.repeat(normals[:, None, :], paths, axis=1), gaussian, uniform)
            values = trace_diffuse(
                domain, problem.ratio_datum,
                np.repeat(times[start:stop] + shift, paths),
                np.repeat(node_points, paths, axis=0),
                u.reshape(-1, domain.dim), seed, key=("lp", chunk), law=problem.law,
            )
            results[label][start:stop] = values.reshape(count, paths).mean(axis=1)
        logger.debug("pos: %d/%d ; flux averages", stop, nodes)

    arc = angle_step * domain.radius
    d_tangent = np.stack([(results[f"r{a}+"] - results[f"r{a}-"]) / (2 * arc) for a in range(tangents)], axis=-1)
    return FluxAverages(times=times, points=points, frames=frames, value=results["base"],
                        d_time=(results["t+"] - results["t-"]) / (2 * time_step), d_tangent=d_tangent)


def boundary_lp_scan(problem: TransportProblem, p: float, horizon: float, deltas: Sequence[float],
                     nodes: int = 2000, paths: int = 500, seed: int = 0, time_step: float = 2e-3,
                     angle_step: float = 2e-3, batch: int = 50_000, velocity_samples: int = 64,
                     averages: Optional[FluxAverages] = None) -> BoundaryIntegral:
    """
    I(delta) = int_0^T int_{gamma_-, |n.v| > delta, |v| < 1/delta} |grad_x f|^p |n.v| dv dS ds
    for diffuse free transport on a sphere.

    On incoming boundary velocities f = mu^{1-a}(v) A(s, x), so the time and
    tangential derivatives come from A and the transport equation gives
    d_n f = -(d_t f + v_tau.grad_tau f) / (n.v). Velocities are sampled with
    |n.v| log-uniform on [min(deltas), 8] and v_tau standard normal, the
    same samples serving every delta. Standard errors come from the spread
    over the boundary nodes; the slope of I against log(1/delta) is a fixed
    linear combination of the I(delta) and gets its standard error the same way.
    """
    deltas = [float(d) for d in deltas]
    if any(later >= earlier for earlier, later in zip(deltas, deltas[1:])):
        raise ValueError("deltas must be decreasing")
    domain = problem.domain
    if problem.bc.kind != BoundaryKind.DIFFUSE:
        raise TypeError("the boundary integral scan needs the diffuse boundary condition")
    if averages is None:
        averages = flux_averages(problem, horizon, nodes, paths, seed, time_step, angle_step, batch)
    nodes = averages.value.size
    tangents = averages.frames.shape[1]

    rng = stream(seed, "lp-velocities")
    delta_min = deltas[-1]
    log_range = math.log(NORMAL_SPEED_MAX / delta_min)
    normal_speed = delta_min * np.exp(rng.random((nodes, velocity_samples)) * log_range)
    tangential = rng.standard_normal((nodes, velocity_samples, tangents))
    density = (1.0 / (normal_speed * log_range)) * np.exp(-0.5 * np.sum(tangential ** 2, axis=-1)) \
        / (2.0 * math.pi) ** (tangents / 2.0)

    normals = averages.points / np.linalg.norm(averages.points, axis=-1, keepdims=True)
    velocities = -normal_speed[..., None] * normals[:, None, :] + np.einsum("nsk,nkd->nsd", tangential,
                                                                                averages.frames)
    weight = problem.weight(velocities)
    transport = averages.d_time[:, None] + np.einsum("nsk,nk->ns", tangential, averages.d_tangent)
    gradient2 = weight ** 2 * ((transport / normal_speed) ** 2 + np.sum(averages.d_tangent ** 2, axis=-1)[:, None])
    measure = (horizon - time_step) * 4.0 * math.pi * domain.radius ** 2
    integrand = measure * gradient2 ** (0.5 * p) * normal_speed / density
    speed = np.linalg.norm(velocities, axis=-1)

    per_node = np.stack([
        np.mean(np.where((normal_speed > delta) & (speed < 1.0 / delta), integrand, 0.0), axis=1) for delta in deltas
    ], axis=-1)
    integrals = per_node.mean(axis=0)
    stderrs = per_node.std(axis=0, ddof=1) / math.sqrt(nodes)

    logs = np.log(1.0 / np.asarray(deltas))
    coefficients = (logs - logs.mean()) / np.sum((logs - logs.mean()) ** 2)
    slopes = per_node @ coefficients
    tail = per_node[:, -1] - per_node[:, max(0, len(deltas) - 3)]
    rows = [{"delta": d, "log_inv_delta": float(l), "p": p, "integral": float(i), "stderr": float(e)}
            for d, l, i, e in zip(deltas, logs, integrals, stderrs)]
    return BoundaryIntegral(
        p=p, deltas=deltas, integrals=integrals, stderrs=stderrs,
        slope=float(slopes.mean()), slope_stderr=float(slopes.std(ddof=1) / math.sqrt(nodes)),
        cauchy_difference=float(tail.mean()), cauchy_stderr=float(tail.std(ddof=1) / math.sqrt(nodes)),
        rows=rows,
    )


# ---------------------------------------------------------------------------- #
#                          Grazing blow-up of d_n f                            #
# ---------------------------------------------------------------------------- #

@dataclass
class BlowupScan:
    fit: Optional[ScalingFit]
    rows: List[dict]


def _rotation(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def normal_derivative(problem: TransportProblem, bc: BoundaryCondition, state: PhaseState) -> float:
    """
    d_n f(t, x, v) with n = x/|x|: the chain rule through the closed-form
    disk flow for specular disks, central differences otherwise.
    """
    normal = state.x / np.linalg.norm(state.x)
    if isinstance(problem.domain, Disk2D) and bc.kind == BoundaryKind.SPECULAR:
        cycle = build_cycle(problem.domain, bc, state, s_min=0.0)
        point, velocity = cycle.evaluate(0.0)
        derivatives = disk_normal_derivatives(state, 0.0, radius=problem.domain.radius)
        grad_x, grad_v = _datum_gradient(problem, point, velocity)
        return float(grad_x @ derivatives.dnX + grad_v @ derivatives.dnV)
    deterministic = TransportProblem(problem.domain, bc, problem.f0, problem.representation)
    gradient = fd_phase_gradient(deterministic, state.t, state.x, state.v)
    return float(gradient.grad_x @ normal)


def grazing_blowup_scan(problem: TransportProblem, bc: BoundaryCondition, config: BlowupConfig) -> BlowupScan:
    """
    Exponent of sup |d_n f(t, x, v)| against alpha(x, v) along the unit-disk grazing family.

    For every alpha the start time runs over one bounce gap past
    config.elapsed, and each state is rotated so that X_cl(0) sits at
    config.anchor_angle; the maximum over that window is the scan value.
    Returns fit None when every value vanishes.
    """
    if not bc.is_deterministic:
        raise TypeError("the blow-up scan needs a deterministic boundary condition")
    if problem.domain.dim != 2:
        raise ValueError("the blow-up scan runs on the disk")
    alphas = np.logspace(np.log10(config.alpha_min), np.log10(config.alpha_max), config.points)
    rows = []
    for index, alpha_target in enumerate(alphas):
        x, v = grazing_family(alpha_target, config.speed, dim=2)
        radius = problem.domain.radius
        chord = math.sqrt(float(x @ v) ** 2 + float(v @ v) * (radius ** 2 - float(x @ x)))
        gap = 2.0 * chord / float(v @ v)
        best = 0.0
        for k in range(config.window_positions):
            t = config.elapsed + gap * k / config.window_positions
            try:
                point, _ = build_cycle(problem.domain, SPECULAR, PhaseState(t, x, v), s_min=0.0).evaluate(0.0)
                rotation = _rotation(config.anchor_angle - math.atan2(point[1], point[0]))
                state = PhaseState(t, rotation @ x, rotation @ v)
                best = max(best, abs(normal_derivative(problem, bc, state)))
            except (AtBounceTime, SegmentCrossing) as e:
                logger.warning("blow-up scan: skipping window %d at alpha = %.3e (%s)", k, alpha_target, e)
        logger.debug("pos: %d/%d ; alpha: %.3e ; sup|d_n f|: %.6e", index + 1, len(alphas), alpha_target, best)
        rows.append({"alpha": float(alpha(problem.domain, x, v)), "sup_dn_f": best})

    values = [row["sup_dn_f"] for row in rows]
    if max(values) == 0.0:
        return BlowupScan(fit=None, rows=rows)
    try:
        fit = fit_power_law([row["alpha"] for row in rows], values, min_points=min(6, len(rows)))
    except FitError as e:
        logger.warning("blow-up scan: %s", e)
        fit = None
    return BlowupScan(fit=fit, rows=rows)
