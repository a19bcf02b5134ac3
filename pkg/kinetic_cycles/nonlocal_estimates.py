import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence

import numpy as np

from .collision import ParameterViolation
from .fitting import fit_power_law, spread
from .geometry import ConvexDomain, PhaseState, Sphere, bracket, tangent_frame
from .kinetic_distance import ALPHA_FLOOR, GrazingDegenerate, alpha
from .quadrature import gauss_jacobi, gauss_legendre, refine_until_stable
from .trajectories import BoundaryCondition, BoundaryKind, build_cycle

logger = logging.getLogger(__name__)

INTERIOR_FLOOR = 1e-10
GAUSSIAN_TAIL = 40.0
RADIAL_CHUNK = 16


@dataclass(frozen=True)
class NonlocalParams:
    """
    Exponent beta of alpha(X, u)^-beta, decay rate l of e^{-l<v>(t-s)},
    Gaussian weight theta, hard-potential kappa, moment exponent r and the
    test weight Z(s) (None for Z = 1).
    """

    beta: float = 1.0
    decay_rate: float = 1.0
    theta: float = 1.0
    kappa: float = 1.0
    r_moment: float = 0.0
    z: Optional[Callable[[float], float]] = None
    radial_nodes: int = 24
    angular_nodes: int = 32
    time_nodes: int = 4
    rtol: float = 1e-3

    def __post_init__(self):
        if not 0.5 < self.beta < 1.5:
            raise ParameterViolation(f"beta must lie in (1/2, 3/2), got {self.beta}")
        if self.theta <= 0:
            raise ParameterViolation(f"theta must be positive, got {self.theta}")


# ---------------------------------------------------------------------------- #
#                              Velocity integral                               #
# ---------------------------------------------------------------------------- #

def _nonempty_panels(breaks):
    return [(a, b) for a, b in zip(breaks, breaks[1:]) if b > a]


def u_integral_at(domain: ConvexDomain, X, v, params: NonlocalParams, radial: int, angular: int,
                  u_factor: bool = False) -> float:
    """
    int e^{-theta|v-u|^2} |v-u|^{kappa-2} (<u>/<v>)^r / alpha(X, u)^beta du
    (times |v|/|u| with u_factor) at a fixed resolution.

    alpha(X, u) = u^T M u with M = grad xi grad xi^T - 2 xi hess xi, so in
    spherical coordinates around u = 0 the radial part is rho^{2-2beta},
    integrated with a Gauss-Jacobi panel up to |v|. The polar cosine c
    against n(X) is graded by c = w sinh(s) with w^2 the ratio of the
    tangential to the normal eigenvalue of M, which resolves the band of
    width ~ sqrt|xi| where alpha(X, u) is small. Panels split at |v|, at
    the polar angle and at the azimuth of v, where |v-u|^{kappa-2} is singular.
    """
    X = np.asarray(X, dtype=float)
    v = np.asarray(v, dtype=float)
    if domain.dim != 3:
        raise ValueError("velocity integrals are implemented for 3D domains")
    xi = float(domain.xi(X))
    if -xi < INTERIOR_FLOOR:
        raise ValueError(f"X must be strictly interior, xi(X) = {xi:.3e}")
    grad = domain.grad_xi(X)
    matrix = np.outer(grad, grad) - 2.0 * xi * domain.hess_xi(X)
    normal = grad / np.linalg.norm(grad)
    t1, t2 = tangent_frame(normal)
    m_nn = float(normal @ matrix @ normal)
    frame = np.stack([t1, t2])
    tangential = float(np.min(np.linalg.eigvalsh(frame @ matrix @ frame.T)))
    width = math.sqrt(tangential / m_nn)

    speed = float(np.linalg.norm(v))
    if speed > 0:
        c_v = float(np.clip(v @ normal / speed, -1.0, 1.0))
        phi_v = math.atan2(float(v @ t2), float(v @ t1))
    else:
        c_v, phi_v = 0.0, 0.0

    # radial panels
    radial_power = 2.0 - 2.0 * params.beta - (1.0 if u_factor else 0.0)
    tail = speed + math.sqrt(GAUSSIAN_TAIL / params.theta)
    panels = _nonempty_panels(sorted({0.0, speed, min(2.0 * speed, tail), tail}))
    rho_list, rho_weights = [], []
    for index, (a, b) in enumerate(panels):
        if index == 0:
            nodes, weights = gauss_jacobi(radial, a, b, left=radial_power, absorb=False)
        else:
            nodes, weights = gauss_legendre(radial, a, b)
            weights = weights * nodes ** radial_power
        rho_list.append(nodes)
        rho_weights.append(weights)
    rho = np.concatenate(rho_list)
    w_rho = np.concatenate(rho_weights)

    # graded polar cosine
    s_max = math.asinh(1.0 / width)
    s_v = math.asinh(c_v / width)
    s_nodes, s_weights = [], []
    for a, b in _nonempty_panels([-s_max, s_v, s_max]):
        nodes, weights = gauss_legendre(angular, a, b)
        s_nodes.append(nodes)
        s_weights.append(weights)
    s = np.concatenate(s_nodes)
    cosine = np.clip(width * np.sinh(s), -1.0, 1.0)
    w_cos = np.concatenate(s_weights) * width * np.cosh(s)
    sine = np.sqrt(1.0 - cosine ** 2)

    phi, w_phi = gauss_legendre(2 * angular, phi_v, phi_v + 2.0 * math.pi)

    directions = (cosine[:, None, None] * normal
                  + sine[:, None, None] * (np.cos(phi)[None, :, None] * t1 + np.sin(phi)[None, :, None] * t2))
    quadratic = np.einsum("abi,ij,abj->ab", directions, matrix, directions)
    angular_weights = w_cos[:, None] * w_phi[None, :] * quadratic ** (-params.beta)
    projection = directions @ v

    value = 0.0
    for start in range(0, rho.size, RADIAL_CHUNK):
        r = rho[start:start + RADIAL_CHUNK, None, None]
        # |v - u|^2 for u = r d
        distance2 = np.maximum(speed ** 2 - 2.0 * r * projection[None] + r ** 2, np.finfo(float).tiny)
        integrand = np.exp(-params.theta * distance2) * distance2 ** (0.5 * params.kappa - 1.0)
        if params.r_moment:
            integrand = integrand * ((1.0 + r ** 2) / (1.0 + speed ** 2)) ** (0.5 * params.r_moment)
        value += float(np.einsum("a,abc,bc->", w_rho[start:start + RADIAL_CHUNK], integrand, angular_weights))
    return speed * value if u_factor else value


@dataclass
class UIntegral:
    value: float
    ratio: float
    xi: float


def grazing_u_integral(domain: ConvexDomain, X, v, params: NonlocalParams) -> UIntegral:
    """
    Velocity integral at an interior point with the ratio
    I |v|^{2 beta - 1} |xi(X)|^{beta - 1/2}.

    Raises:
        QuadratureDivergence: If doubling the resolution does not stabilize to params.rtol.
    """
    xi = float(domain.xi(X))

    def evaluate(level):
        return u_integral_at(domain, X, v, params, params.radial_nodes * level // 16,
                             params.angular_nodes * level // 16)

    value = refine_until_stable(evaluate, 16, rtol=params.rtol, max_doublings=2)
    speed = float(np.linalg.norm(v))
    return UIntegral(value=value, ratio=value * speed ** (2 * params.beta - 1) * abs(xi) ** (params.beta - 0.5), xi=xi)


def interior_point(domain: Sphere, depth: float, axis=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Point on the axis with xi(X) = -depth."""
    axis = np.asarray(axis, dtype=float) / np.linalg.norm(axis)
    return math.sqrt(domain.radius ** 2 - depth) * axis


def u_integral_scan(domain: Sphere, params: NonlocalParams, depths: Sequence[float], speed: float = 1.0):
    """Velocity integrals at X with |xi(X)| = depth and a fixed oblique v."""
    direction = np.array([1.0, 0.0, 0.3]) / math.hypot(1.0, 0.3)
    rows = []
    for depth in depths:
        result = grazing_u_integral(domain, interior_point(domain, depth), speed * direction, params)
        rows.append({"xi": abs(result.xi), "beta": params.beta, "integral": result.value, "ratio": result.ratio})
    fit = fit_power_law([row["xi"] for row in rows], [row["integral"] for row in rows], min_points=min(6, len(rows)))
    return rows, fit


# ---------------------------------------------------------------------------- #
#                              Trajectory integral                             #
# ---------------------------------------------------------------------------- #

@dataclass
class Segment:
    lower: float
    upper: float
    singular_lower: bool
    singular_upper: bool
    index: int

    @property
    def full(self) -> bool:
        return self.singular_lower and self.singular_upper


def trajectory_segments(cycle, s_lower: float = 0.0) -> List[Segment]:
    """Free-flight segments of [s_lower, t], flagged at the ends that are bounces."""
    times = cycle.times
    segments = []
    for index in range(len(times)):
        upper = times[index]
        lower = times[index + 1] if index + 1 < len(times) else s_lower
        if upper <= lower:
            continue
        segments.append(Segment(lower, upper, index + 1 < len(times), index > 0, index))
    return segments


def _chords_congruent(domain: ConvexDomain, bc: BoundaryCondition) -> bool:
    return bc.kind == BoundaryKind.BOUNCE_BACK or (bc.kind == BoundaryKind.SPECULAR and isinstance(domain, Sphere))


@dataclass
class NonlocalResult:
    lhs: float
    rhs_scale: float
    ratio: float
    alpha: float
    segments: int
    details: dict = field(default_factory=dict)


def dynamical_nonlocal_integral(domain: ConvexDomain, bc: BoundaryCondition, state: PhaseState,
                                params: NonlocalParams, u_factor: bool = False, split: int = 1) -> NonlocalResult:
    """
    int_0^t e^{-l<v>(t-s)} Z(s) int e^{-theta|V-u|^2}/|V-u|^{2-kappa} (<u>/<v>)^r
        / alpha(X(s), u)^beta du ds

    along the backward cycle, with the ratio lhs <v> alpha(x, v)^{beta - 1/2}.

    The time integral is a Gauss-Jacobi rule per free-flight segment with
    exponent 1/2 - beta at bounce ends, where |xi(X(s))| vanishes linearly.
    split > 1 subdivides each segment further. Chords that are congruent
    (every chord of a sphere, every bounce-back chord) share one inner
    profile.

    Raises:
        TypeError: For diffuse boundary conditions.
        GrazingDegenerate: If alpha(x, v) is below the grazing floor.
    """
    if not bc.is_deterministic:
        raise TypeError("the trajectory integral needs a deterministic boundary condition")
    speed = state.speed
    alpha0 = alpha(domain, state.x, state.v)
    if alpha0 < ALPHA_FLOOR * speed ** 4:
        raise GrazingDegenerate(f"alpha(x, v) = {alpha0:.3e} below the grazing floor")

    cycle = build_cycle(domain, bc, state, s_min=0.0)
    weight = float(bracket(state.v))
    exponent = 0.5 - params.beta
    reuse = _chords_congruent(domain, bc)
    profiles = {}

    def inner(points, velocities):
        return np.array([
            u_integral_at(domain, X, V, params, params.radial_nodes, params.angular_nodes, u_factor=u_factor)
            for X, V in zip(points, velocities)
        ])

    lhs = 0.0
    segments = trajectory_segments(cycle)
    for segment in segments:
        pieces = np.linspace(segment.lower, segment.upper, split + 1)
        for piece, (a, b) in enumerate(zip(pieces, pieces[1:])):
            left = exponent if (piece == 0 and segment.singular_lower) else 0.0
            right = exponent if (piece == split - 1 and segment.singular_upper) else 0.0
            nodes, weights = gauss_jacobi(params.time_nodes, a, b, left=left, right=right)
            key = (piece, round((b - a) / max(segment.upper - segment.lower, 1e-300), 12))
            if reuse and segment.full and key in profiles:
                reference, values = profiles[key]
                reverse = bc.kind == BoundaryKind.BOUNCE_BACK and (segment.index - reference) % 2 == 1
                values = values[::-1] if reverse else values
            else:
                points, velocities = cycle.evaluate_many(nodes)
                values = inner(points, velocities)
                if reuse and segment.full:
                    profiles[key] = (segment.index, values)
            decay = np.exp(-params.decay_rate * weight * (state.t - nodes))
            if params.z is not None:
                decay = decay * np.array([params.z(node) for node in nodes])
            lhs += float(np.sum(weights * decay * values))

    rhs_scale = 1.0 / (weight * alpha0 ** (params.beta - 0.5))
    return NonlocalResult(lhs=lhs, rhs_scale=rhs_scale, ratio=lhs / rhs_scale, alpha=alpha0,
                          segments=len(segments), details={"bounces": cycle.bounces})


def nonlocal_u_variant(domain: ConvexDomain, bc: BoundaryCondition, state: PhaseState, params: NonlocalParams,
                       clamp: bool = False) -> NonlocalResult:
    """
    Trajectory integral with the extra factor |v|/|u| (dropped with clamp=True).

    The radial rule absorbs the additional 1/|u|, so 1/2 < beta < 1 is needed.
    """
    if not clamp and not 0.5 < params.beta < 1.0:
        raise ParameterViolation(f"the |v|/|u| variant needs 1/2 < beta < 1, got {params.beta}")
    return dynamical_nonlocal_integral(domain, bc, state, params, u_factor=not clamp)


def segment_additivity_residual(domain: ConvexDomain, bc: BoundaryCondition, state: PhaseState,
                                params: NonlocalParams) -> float:
    """Relative difference between the per-segment integral and the one split once more at every midpoint."""
    coarse = dynamical_nonlocal_integral(domain, bc, state, params).lhs
    fine = dynamical_nonlocal_integral(domain, bc, state, params, split=2).lhs
    return abs(coarse - fine) / abs(fine)


def calibrate_decay_rate(domain: ConvexDomain, bc: BoundaryCondition, states: Sequence[PhaseState],
                         params: NonlocalParams, start: float = 10.0, tolerance: float = 0.05,
                         max_doublings: int = 6) -> float:
    """
    Double l from start until the spread (max/min) of the ratios over the
    given states changes by less than tolerance, and return the smaller rate
    of the last pair (start itself when the spread is flat from the outset).
    """
    rate = start
    previous = None
    for _ in range(max_doublings + 1):
        current_params = replace(params, decay_rate=rate)
        ratios = [dynamical_nonlocal_integral(domain, bc, state, current_params).ratio for state in states]
        current = spread(ratios)
        logger.debug("decay rate %.3g: ratio spread %.4g", rate, current)
        if previous is not None and abs(current - previous) <= tolerance * previous:
            return rate / 2.0
        previous = current
        rate *= 2.0
    logger.warning("decay rate calibration did not stabilize, using l = %.3g", rate / 2.0)
    return rate / 2.0
