import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from tenacity import Retrying, retry_if_exception_type, stop_after_attempt

from .config_classes import JacobianConfig
from .fitting import FitError, ScalingFit, fit_power_law, tail_fits, tails_consistent
from .geometry import ConvexDomain, Disk2D, PhaseState, backward_exit_time, exit_times
from .kinetic_distance import alpha
from .trajectories import (
    SPECULAR, AtBounceTime, BoundaryCondition, CenterDegenerate, build_cycle, exact_gap,
)

logger = logging.getLogger(__name__)

GRAZING_EXIT = 1e-10
FD_STEP = 1e-6
FD_SHRINKS = 4


class GrazingExit(ArithmeticError):
    def __init__(self, message="Incidence at the exit point below 1e-10 |v|"):
        super().__init__(message)

class SegmentCrossing(RuntimeError):
    def __init__(self, message="Finite-difference stencil crosses a bounce time"):
        super().__init__(message)


# ---------------------------------------------------------------------------- #
#                               Exit derivatives                               #
# ---------------------------------------------------------------------------- #

@dataclass(eq=False)
class ExitDerivatives:
    """
    Derivatives of the exit data. Matrices hold d(output_i)/d(input_j) in
    row i, column j.
    """

    t_b: float
    x_b: np.ndarray
    dx_tb: np.ndarray
    dv_tb: np.ndarray
    dx_xb: np.ndarray
    dv_xb: np.ndarray


def _incidence_ratio(domain, point, v):
    """grad xi / (v.grad xi) at a boundary point, with the grazing check."""
    grad = domain.grad_xi(point)
    denominator = float(grad @ v)
    if abs(denominator) <= GRAZING_EXIT * np.linalg.norm(v) * np.linalg.norm(grad):
        raise GrazingExit(f"|n.v| = {abs(denominator) / np.linalg.norm(grad):.3e} at x = {point}")
    return grad / denominator


def d_exit(domain: ConvexDomain, x, v) -> ExitDerivatives:
    """
    Closed-form derivatives of t_b and x_b = x - t_b v.

    grad_x t_b = n/(v.n), grad_v t_b = -t_b n/(v.n) with n = n(x_b), and the
    chain rule through x_b gives grad_x x_b = I - v (x) grad_x t_b and
    grad_v x_b = -t_b I - v (x) grad_v t_b.

    Raises:
        GrazingExit: If |v.n(x_b)| <= 1e-10 |v|.
    """
    v = np.asarray(v, dtype=float)
    data = backward_exit_time(domain, x, v)
    ratio = _incidence_ratio(domain, data.x_b, v)
    dx_tb = ratio
    dv_tb = -data.t_b * ratio
    identity = np.eye(domain.dim)
    return ExitDerivatives(
        t_b=data.t_b,
        x_b=data.x_b,
        dx_tb=dx_tb,
        dv_tb=dv_tb,
        dx_xb=identity - np.outer(v, dx_tb),
        dv_xb=-data.t_b * identity - np.outer(v, dv_tb),
    )


@dataclass(eq=False)
class BounceBackDerivatives:
    ell: int
    dx_t: np.ndarray
    dv_t: np.ndarray
    dx_x: np.ndarray
    dv_x: np.ndarray
    dx_v: np.ndarray
    dv_v: np.ndarray
    dx_gap: np.ndarray
    dv_gap: np.ndarray


def bounce_back_cycle_derivatives(domain: ConvexDomain, state: PhaseState, ell: int) -> BounceBackDerivatives:
    """
    Derivatives of (t_l, x_l, v_l) of the bounce-back cycle and of the gap t_l - t_{l+1}.

    With n1 = grad xi(x^1)/(v.grad xi(x^1)) = grad_x t_b and
    n2 = grad xi(x^2)/(v.grad xi(x^2)), and tau the constant gap:
        d_x tau = -n2 + n1,               d_v tau = (t_b - tau) n2 + grad_v t_b,
        d_x t_l = -l n1 + (l-1) n2,       d_v t_l = -grad_v t_b - (l-1) d_v tau,
        d_x x_l = I - v (x) n1 (l odd),   I - v (x) n2 (l even),
        d_v x_1 = -t_b I - v (x) grad_v t_b,  d_v x_2 = d_v x_1 + tau I + v (x) d_v tau,
        d_x v_l = 0,                      d_v v_l = (-1)^l I.

    Raises:
        GrazingExit: If either bounce point is grazing.
    """
    if ell < 0:
        raise ValueError(f"Bounce index must be >= 0, got {ell}")
    x, v = state.x, state.v
    dim = domain.dim
    identity = np.eye(dim)
    first = d_exit(domain, x, v)

    first_point = first.x_b
    gap = float(exit_times(domain, first_point, -v))
    second_point = first_point + gap * v
    n2 = _incidence_ratio(domain, second_point, v)

    dx_gap_ell = -n2 + first.dx_tb
    dv_gap_ell = (first.t_b - gap) * n2 + first.dv_tb

    if ell == 0:
        zero = np.zeros(dim)
        return BounceBackDerivatives(
            ell=0, dx_t=zero, dv_t=zero, dx_x=identity, dv_x=np.zeros((dim, dim)),
            dx_v=np.zeros((dim, dim)), dv_v=identity, dx_gap=first.dx_tb, dv_gap=first.dv_tb,
        )

    dv_first = -first.t_b * identity - np.outer(v, first.dv_tb)
    if ell % 2 == 1:
        dx_x = identity - np.outer(v, first.dx_tb)
        dv_x = dv_first
    else:
        dx_x = identity - np.outer(v, n2)
        dv_x = dv_first + gap * identity + np.outer(v, dv_gap_ell)
    return BounceBackDerivatives(
        ell=ell,
        dx_t=-ell * first.dx_tb + (ell - 1) * n2,
        dv_t=-first.dv_tb - (ell - 1) * dv_gap_ell,
        dx_x=dx_x,
        dv_x=dv_x,
        dx_v=np.zeros((dim, dim)),
        dv_v=(-1) ** ell * identity,
        dx_gap=dx_gap_ell,
        dv_gap=dv_gap_ell,
    )


# ---------------------------------------------------------------------------- #
#                            Trajectory Jacobians                              #
# ---------------------------------------------------------------------------- #

@dataclass(eq=False)
class TrajectoryJacobian:
    """
    d(X_cl, V_cl)(s)/d(t, x, v): rows X then V, columns t, x, v.
    """

    matrix: np.ndarray
    s: float
    segment: int
    steps: Optional[np.ndarray] = None
    margin: float = np.inf

    @property
    def dim(self) -> int:
        return self.matrix.shape[0] // 2

    def block(self, name: str) -> np.ndarray:
        d = self.dim
        rows = slice(0, d) if name.endswith("X") else slice(d, 2 * d)
        columns = {"dt": slice(0, 1), "dx": slice(1, 1 + d), "dv": slice(1 + d, 1 + 2 * d)}[name[:2]]
        return self.matrix[rows, columns]

    def block_norms(self) -> Dict[str, float]:
        return {name: float(np.linalg.norm(self.block(name), 2)) for name in ("dxX", "dvX", "dxV", "dvV")}


def free_flight_jacobian(dim: int, v, elapsed: float) -> np.ndarray:
    """[-v, I, -(t-s) I; 0, 0, I]"""
    identity = np.eye(dim)
    top = np.hstack([-np.asarray(v, dtype=float)[:, None], identity, -elapsed * identity])
    bottom = np.hstack([np.zeros((dim, 1)), np.zeros((dim, dim)), identity])
    return np.vstack([top, bottom])


def _flow(domain, bc, t, x, v, s):
    cycle = build_cycle(domain, bc, PhaseState(t, x, v), s_min=s)
    point, velocity = cycle.evaluate(s)
    lower, upper = cycle.segment_bounds(s)
    return np.concatenate([point, velocity]), cycle.segment_index(s), min(s - lower, upper - s)


def default_steps(domain: ConvexDomain, state: PhaseState) -> np.ndarray:
    """
    Per-direction central-difference steps.

    1e-6 times the coordinate scale (domain scale for t and x, |v| for v),
    shrunk by (alpha/|v|^4)^(3/4) near the grazing set.
    """
    speed = state.speed
    grazing = min(1.0, alpha(domain, state.x, state.v) / speed ** 4) ** 0.75
    scales = np.concatenate([[domain.scale], np.full(domain.dim, domain.scale), np.full(domain.dim, speed)])
    return FD_STEP * grazing * np.maximum(scales, 1e-300)


def _stencil(domain, bc, state, s, steps):
    dim = domain.dim
    base, segment, margin = _flow(domain, bc, state.t, state.x, state.v, s)
    columns = []
    for k, h in enumerate(steps):
        shift = np.zeros(1 + 2 * dim)
        shift[k] = h
        values = []
        for sign in (1.0, -1.0):
            z = sign * shift
            try:
                value, other, other_margin = _flow(
                    domain, bc, state.t + z[0], state.x + z[1:1 + dim], state.v + z[1 + dim:], s
                )
            except AtBounceTime as e:
                raise SegmentCrossing(f"direction {k}: {e}") from e
            if other != segment:
                raise SegmentCrossing(f"direction {k}: segment {other} vs {segment} at h = {h:.3e}")
            margin = min(margin, other_margin)
            values.append(value)
        columns.append((values[0] - values[1]) / (2.0 * h))
    return np.stack(columns, axis=-1), segment, margin


def fd_trajectory_jacobian(domain: ConvexDomain, bc: BoundaryCondition, state: PhaseState, s: float,
                           h: Optional[Sequence[float]] = None) -> TrajectoryJacobian:
    """
    Central-difference Jacobian of the backward flow at time s.

    The stencil must keep every perturbed evaluation inside the segment of
    the unperturbed one; otherwise the steps are halved, up to 4 times.

    Raises:
        TypeError: For diffuse boundary conditions.
        SegmentCrossing: If no admissible step was found.
    """
    if not bc.is_deterministic:
        raise TypeError("Trajectory Jacobians are undefined for diffuse boundary conditions")
    steps = np.asarray(default_steps(domain, state) if h is None else h, dtype=float)
    if steps.ndim == 0:
        steps = np.full(1 + 2 * domain.dim, float(steps))

    attempt_steps = [steps]

    def attempt():
        current = attempt_steps[-1]
        attempt_steps.append(0.5 * current)
        return _stencil(domain, bc, state, s, current), current

    for trial in Retrying(stop=stop_after_attempt(FD_SHRINKS + 1),
                          retry=retry_if_exception_type(SegmentCrossing), reraise=True):
        with trial:
            (matrix, segment, margin), used = attempt()
    return TrajectoryJacobian(matrix=matrix, s=s, segment=segment, steps=used, margin=margin)


@dataclass
class EnvelopeNorms:
    """Block norms maximized over several times inside one bounce segment."""

    norms: Dict[str, float]
    times: List[float]
    segment: int
    min_step: float


def segment_envelope(domain: ConvexDomain, bc: BoundaryCondition, state: PhaseState, s: float,
                     fractions: Sequence[float] = (0.25, 0.5, 0.75), analytic: bool = False) -> EnvelopeNorms:
    """
    Jacobian block norms at fixed fractions of the segment containing s.

    Single mid-chord values can cancel; the maximum over the segment follows
    the envelope of the derivative growth.
    """
    cycle = build_cycle(domain, bc, state, s_min=s)
    lower, upper = cycle.segment_bounds(s)
    if not np.isfinite(lower):
        lower = s
    times = [lower + f * (upper - lower) for f in fractions]
    norms = {name: 0.0 for name in ("dxX", "dvX", "dxV", "dvV")}
    min_step = np.inf
    for time in times:
        if analytic:
            jacobian = disk_flow_jacobian(state, time, radius=domain.radius)
        else:
            jacobian = fd_trajectory_jacobian(domain, bc, state, time)
            min_step = min(min_step, float(np.min(jacobian.steps)))
        for name, value in jacobian.block_norms().items():
            norms[name] = max(norms[name], value)
    return EnvelopeNorms(norms=norms, times=times, segment=cycle.segment_index(s), min_step=min_step)


# ---------------------------------------------------------------------------- #
#                          Analytic disk flow Jacobian                         #
# ---------------------------------------------------------------------------- #

def _polar_gradient(first_component, second_component, g_first, g_second):
    """Gradient of atan2(b, a) given gradients of a and b."""
    return (first_component * g_second - second_component * g_first) / (first_component ** 2 + second_component ** 2)


def disk_flow_jacobian(state: PhaseState, s: float, radius: float = 1.0) -> TrajectoryJacobian:
    """
    Exact d(X, V)(s)/d(t, x, v) of the specular disk flow, by the chain rule
    through the closed-form bounce times and angles.

    Gradients are taken with respect to z = (x1, x2, v1, v2).
    """
    x, v = state.x, state.v
    if x.shape != (2,):
        raise ValueError("disk_flow_jacobian needs a 2D state")
    t = state.t
    x1, x2 = x
    v1, v2 = v
    proj = float(x @ v)
    speed2 = float(v @ v)
    gap_radius = exact_gap(radius, x)
    chord2 = proj ** 2 + speed2 * gap_radius
    chord = math.sqrt(chord2)
    if chord == 0:
        raise GrazingExit("Zero chord: grazing boundary state")

    g_proj = np.array([v1, v2, x1, x2])
    g_speed2 = np.array([0.0, 0.0, 2 * v1, 2 * v2])
    g_gap_radius = np.array([-2 * x1, -2 * x2, 0.0, 0.0])
    g_chord = (2 * proj * g_proj + gap_radius * g_speed2 + speed2 * g_gap_radius) / (2 * chord)

    t_b = gap_radius / (chord - proj) if proj < 0 else (proj + chord) / speed2
    g_t_b = (g_proj + g_chord) / speed2 - (proj + chord) * g_speed2 / speed2 ** 2
    gap = 2 * chord / speed2
    g_gap = 2 * g_chord / speed2 - 2 * chord * g_speed2 / speed2 ** 2

    identity = np.eye(2)
    elapsed = t - s
    if elapsed < t_b:
        return TrajectoryJacobian(free_flight_jacobian(2, v, elapsed), s=s, segment=0)

    ell = int(math.floor((t - t_b - s) / gap)) + 1
    t_ell = t - t_b - (ell - 1) * gap
    g_t_ell = -g_t_b - (ell - 1) * g_gap

    momentum = x1 * v2 - x2 * v1
    g_momentum = np.array([v2, -v1, -x2, x1])
    phi = math.atan2(chord, momentum)
    g_phi = _polar_gradient(momentum, chord, g_momentum, g_chord)

    first = x - t_b * v
    g_first = np.hstack([identity, -t_b * identity]) - np.outer(v, g_t_b)
    theta = math.atan2(first[1], first[0]) - 2 * (ell - 1) * phi
    g_theta = _polar_gradient(first[0], first[1], g_first[0], g_first[1]) - 2 * (ell - 1) * g_phi

    speed = math.sqrt(speed2)
    psi = math.atan2(v2, v1) - 2 * ell * phi
    g_psi = np.array([0.0, 0.0, -v2 / speed2, v1 / speed2]) - 2 * ell * g_phi

    direction = np.array([math.cos(psi), math.sin(psi)])
    normal_direction = np.array([-math.sin(psi), math.cos(psi)])
    g_velocity = np.outer(direction, g_speed2 / (2 * speed)) + speed * np.outer(normal_direction, g_psi)
    velocity = speed * direction
    g_position = radius * np.outer([-math.sin(theta), math.cos(theta)], g_theta)

    g_point = g_position - np.outer(velocity, g_t_ell) - (t_ell - s) * g_velocity
    top = np.hstack([-velocity[:, None], g_point])
    bottom = np.hstack([np.zeros((2, 1)), g_velocity])
    return TrajectoryJacobian(np.vstack([top, bottom]), s=s, segment=ell)


@dataclass
class DiskNormalDerivatives:
    """
    Polar-frame derivatives of the disk flow at time s.

    dn = n.grad_x, dtheta = (-x2, x1).grad_x,
    dvn = n.grad_v and dvtheta = n_perp.grad_v, with n = x/r.
    """

    dnX: np.ndarray
    dnV: np.ndarray
    dnX_tangential: float
    dnV_normal: float
    table: Dict[str, float]
    predicted_dnX: float
    predicted_dnV: float
    chord2: float

    @property
    def ratio_dnX(self) -> float:
        return abs(self.dnX_tangential) / self.predicted_dnX

    @property
    def ratio_dnV(self) -> float:
        return abs(self.dnV_normal) / self.predicted_dnV


def disk_normal_derivatives(state: PhaseState, s: float, radius: float = 1.0) -> DiskNormalDerivatives:
    """
    Normal and tangential derivatives of the specular disk flow.

    The predicted magnitudes are |t-s| v_theta^2 / sqrt(D) for the tangential
    part of dn X and |t-s| |v|^4 / D for the normal part of dn V, with
    D = v_n^2 + (1 - r^2) v_theta^2.

    Raises:
        CenterDegenerate: If x = 0.
    """
    x, v = state.x, state.v
    r = float(np.linalg.norm(x))
    if r == 0:
        raise CenterDegenerate()
    normal = x / r
    perpendicular = np.array([-normal[1], normal[0]])
    jacobian = disk_flow_jacobian(state, s, radius=radius)
    dX = jacobian.matrix[:2, 1:]
    dV = jacobian.matrix[2:, 1:]
    directions = {
        "n": np.concatenate([normal, [0.0, 0.0]]),
        "theta": np.concatenate([r * perpendicular, [0.0, 0.0]]),
        "vn": np.concatenate([[0.0, 0.0], normal]),
        "vtheta": np.concatenate([[0.0, 0.0], perpendicular]),
    }
    table = {}
    for name, direction in directions.items():
        table[f"d{name}X"] = float(np.linalg.norm(dX @ direction))
        table[f"d{name}V"] = float(np.linalg.norm(dV @ direction))
    dnX = dX @ directions["n"]
    dnV = dV @ directions["n"]
    v_theta = float(perpendicular @ v)
    chord2 = float(x @ v) ** 2 + float(v @ v) * exact_gap(radius, x)
    elapsed = abs(state.t - s)
    return DiskNormalDerivatives(
        dnX=dnX,
        dnV=dnV,
        dnX_tangential=float(dnX @ perpendicular),
        dnV_normal=float(dnV @ normal),
        table=table,
        predicted_dnX=elapsed * v_theta ** 2 / math.sqrt(chord2),
        predicted_dnV=elapsed * float(v @ v) ** 2 / chord2,
        chord2=chord2,
    )


# ---------------------------------------------------------------------------- #
#                                Scaling scans                                 #
# ---------------------------------------------------------------------------- #

def grazing_family(alpha_target: float, speed: float = 1.0, dim: int = 3):
    """
    Position and velocity on the unit ball with alpha(x, v) = alpha_target.

    With D = alpha / (4 |v|^2) and unit directions, v_n^2 = D/2 and
    1 - r^2 = (D/2)/(1 - D/2) give r^2 v_n^2 + (1 - r^2) = D.
    """
    unit = alpha_target / (4.0 * speed ** 2)
    if not 0 < unit < 1:
        raise ValueError(f"alpha = {alpha_target} outside the grazing family range")
    r = math.sqrt((1.0 - unit) / (1.0 - 0.5 * unit))
    v_n = math.sqrt(0.5 * unit)
    v_theta = math.sqrt(1.0 - 0.5 * unit)
    x = np.zeros(dim)
    v = np.zeros(dim)
    x[0] = r
    v[0], v[1] = speed * v_n, speed * v_theta
    return x, v


@dataclass
class ScalingBundle:
    fits: Dict[str, ScalingFit]
    rows: List[dict]
    passed: Dict[str, bool]
    skipped: int = 0
    tails_monotone: Dict[str, bool] = field(default_factory=dict)


EXPECTED_RATES = {"dxX": -0.5, "dvX": 0.0, "dxV": -1.0, "dvV": -0.5}


def scaling_exponents(domain: ConvexDomain, bc: BoundaryCondition, config: JacobianConfig) -> ScalingBundle:
    """
    Fit log-log slopes of the four Jacobian blocks against alpha along a grazing approach.

    A block passes when its slope is not below the growth rate the bounds
    allow, minus the tolerance; the sphere scan additionally pins the slopes
    to those rates within the tolerance.
    """
    alphas = np.logspace(np.log10(config.alpha_min), np.log10(config.alpha_max), config.points)
    rows, skipped = [], 0
    for index, alpha_target in enumerate(alphas):
        x, v = grazing_family(alpha_target, config.speed, domain.dim)
        state = PhaseState(config.elapsed, x, v)
        try:
            envelope = segment_envelope(domain, bc, state, 0.0, config.fractions)
        except SegmentCrossing as e:
            logger.warning("jacobian scan: skipping alpha = %.3e (%s)", alpha_target, e)
            skipped += 1
            continue
        logger.debug("pos: %d/%d ; alpha: %.3e ; norms: %s", index + 1, len(alphas), alpha_target, envelope.norms)
        rows.append({"alpha": float(alpha(domain, x, v)), **{f"sup_{k}": val for k, val in envelope.norms.items()},
                     "h_used": envelope.min_step, "segment": envelope.segment})

    if len(rows) < 6:
        raise FitError(f"{len(rows)} valid scan points, need 6")
    measured = np.array([row["alpha"] for row in rows])
    fits, passed, tails = {}, {}, {}
    for name, rate in EXPECTED_RATES.items():
        values = np.array([row[f"sup_{name}"] for row in rows])
        fits[name] = fit_power_law(measured, values)
        passed[name] = fits[name].exponent >= rate - config.slope_tolerance
        try:
            tails[name] = tails_consistent(tail_fits(measured, values), config.slope_tolerance)
        except FitError:
            tails[name] = True
    return ScalingBundle(fits=fits, rows=rows, passed=passed, skipped=skipped, tails_monotone=tails)


def disk_normal_scan(config: JacobianConfig, radius: float = 1.0) -> List[dict]:
    """
    Segment envelopes of |d_n X| and |d_n V . n| on the unit-disk grazing family.

    Returns one row per alpha with the ratios against the predicted
    magnitudes at the last sampled time.
    """
    disk = Disk2D(radius)
    rows = []
    for alpha_target in np.logspace(np.log10(config.disk_alpha_min), np.log10(config.disk_alpha_max), config.points):
        x, v = grazing_family(alpha_target, config.speed, dim=2)
        state = PhaseState(config.disk_elapsed, x, v)
        lower, upper = build_cycle(disk, SPECULAR, state, s_min=0.0).segment_bounds(0.0)
        sup_x, sup_v = 0.0, 0.0
        for fraction in config.fractions:
            derivatives = disk_normal_derivatives(state, lower + fraction * (upper - lower), radius=radius)
            sup_x = max(sup_x, float(np.linalg.norm(derivatives.dnX)))
            sup_v = max(sup_v, abs(derivatives.dnV_normal))
        rows.append({
            "alpha": float(alpha(disk, x, v)),
            "sup_dnX": sup_x,
            "sup_dnV_normal": sup_v,
            "ratio_dnX": sup_x / derivatives.predicted_dnX,
            "ratio_dnV": sup_v / derivatives.predicted_dnV,
        })
    return rows
