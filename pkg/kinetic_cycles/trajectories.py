import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Optional

import numpy as np

from .geometry import (
    ConvexDomain, Disk2D, PhaseState, Sphere, exit_times, outward_normal, tangent_frame,
)
from .kinetic_distance import alpha, velocity_lemma_constant
from .rng import stream

logger = logging.getLogger(__name__)

DEFAULT_BOUNCE_CAP = 10 ** 6
STALL_TIME = 1e-13
BOUNCE_TIME_TOLERANCE = 1e-13


class BounceCapExceeded(RuntimeError):
    def __init__(self, message="Bounce cap exceeded (near-grazing accumulation)", partial=None):
        super().__init__(message)
        self.partial = partial

class GrazingStall(RuntimeError):
    def __init__(self, message="Exit time below 1e-13 on two consecutive bounces"):
        super().__init__(message)

class AtBounceTime(ValueError):
    def __init__(self, message="Evaluation time coincides with a bounce time"):
        super().__init__(message)

class CenterDegenerate(ValueError):
    def __init__(self, message="Polar angle undefined at the disk center (r = 0)"):
        super().__init__(message)


class BoundaryKind(str, Enum):
    SPECULAR = "specular"
    BOUNCE_BACK = "bounce-back"
    DIFFUSE = "diffuse"


@dataclass(frozen=True)
class BoundaryCondition:
    kind: BoundaryKind
    seed: int = 0
    trajectory_id: int = 0

    @property
    def is_deterministic(self) -> bool:
        return self.kind != BoundaryKind.DIFFUSE

    @classmethod
    def from_name(cls, name: str, seed: int = 0) -> "BoundaryCondition":
        return cls(BoundaryKind(name.lower().replace("_", "-")), seed=seed)


SPECULAR = BoundaryCondition(BoundaryKind.SPECULAR)
BOUNCE_BACK = BoundaryCondition(BoundaryKind.BOUNCE_BACK)


@dataclass(frozen=True)
class DiffuseLaw:
    """Maxwellian mu(v) = e^{-|v|^2/2} and the flux law c_mu mu(u) (n.u) du on {n.u > 0}."""

    dim: int = 3

    @property
    def c_mu(self) -> float:
        return (2.0 * math.pi) ** (-(self.dim - 1) / 2.0)

    def maxwellian(self, v):
        v = np.asarray(v, dtype=float)
        return np.exp(-0.5 * np.sum(v * v, axis=-1))

    def flux_density(self, u, n):
        u = np.asarray(u, dtype=float)
        return self.c_mu * self.maxwellian(u) * np.maximum(np.sum(u * np.asarray(n), axis=-1), 0.0)


def flux_velocity(n, gaussian, uniform):
    """
    Outgoing velocity of the Maxwell flux law at unit normals n from raw draws.

    The tangential part is the Gaussian projected on the tangent plane
    (smooth in n); the normal part uses the inverse CDF
    v_n = sqrt(-2 log(1 - U)) and is strictly positive.
    """
    n = np.asarray(n, dtype=float)
    tangential = gaussian - np.sum(gaussian * n, axis=-1, keepdims=True) * n
    survival = np.minimum(1.0 - uniform, 1.0 - 2.0 ** -53)
    normal_speed = np.sqrt(-2.0 * np.log(survival))
    return tangential + normal_speed[..., None] * n


def sample_diffuse_velocity(law: DiffuseLaw, n, rng: np.random.Generator):
    """Draw outgoing velocities from the Maxwell flux law at unit normals n."""
    n = np.asarray(n, dtype=float)
    if n.shape[-1] != law.dim:
        raise ValueError(f"Normal of dimension {n.shape[-1]} for a {law.dim}D law")
    gaussian = rng.standard_normal(n.shape)
    return flux_velocity(n, gaussian, rng.random(n.shape[:-1]))


def specular_reflection(normal, v):
    """R_x v = v - 2 n (n.v)"""
    normal = np.asarray(normal, dtype=float)
    return v - 2.0 * np.sum(normal * v, axis=-1, keepdims=True) * normal


# ---------------------------------------------------------------------------- #
#                                    Cycles                                    #
# ---------------------------------------------------------------------------- #

@dataclass(eq=False)
class Cycle:
    """
    Backward bounce sequence (t_l, x_l, v_l), l = 0..l_max, with (t_0, x_0, v_0) = (t, x, v).

    v_l is the velocity used on the segment [t_{l+1}, t_l) after the bounce at x_l;
    for a start on the boundary with t_b(x, v) = 0 that includes the bounce at x_0.
    """

    domain: ConvexDomain
    bc: BoundaryCondition
    times: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    s_min: float
    truncated: bool = False
    notes: dict = field(default_factory=dict)

    @property
    def t(self) -> float:
        return float(self.times[0])

    @property
    def x(self) -> np.ndarray:
        return self.positions[0]

    @property
    def v(self) -> np.ndarray:
        return self.velocities[0]

    @property
    def bounces(self) -> int:
        return len(self.times) - 1

    @property
    def entries(self):
        return list(zip(self.times, self.positions, self.velocities))

    def grazing_ratios(self) -> np.ndarray:
        """r_l = |v_l.n(x_l)| / |v_l|; NaN for an interior starting point."""
        ratios = np.full(len(self.times), np.nan)
        if len(self.times) > 1:
            normals = outward_normal(self.domain, self.positions[1:])
            ratios[1:] = np.abs(np.sum(normals * self.velocities[1:], axis=-1)) / np.linalg.norm(self.velocities[1:], axis=-1)
        if abs(float(self.domain.xi(self.x))) <= self.domain.band:
            ratios[0] = abs(float(outward_normal(self.domain, self.x) @ self.v)) / np.linalg.norm(self.v)
        return ratios

    def segment_index(self, s: float) -> int:
        """l with t_{l+1} <= s < t_l, and 0 for s = t."""
        return int(np.count_nonzero(self.times[1:] > s))

    def _check_time(self, s):
        if s > self.t + BOUNCE_TIME_TOLERANCE or s < self.s_min - BOUNCE_TIME_TOLERANCE:
            raise ValueError(f"s = {s} outside the cycle horizon [{self.s_min}, {self.t}]")
        if len(self.times) > 1 and np.min(np.abs(self.times[1:] - s)) < BOUNCE_TIME_TOLERANCE:
            raise AtBounceTime(f"s = {s} within 1e-13 of a bounce time")

    def evaluate(self, s: float):
        """
        Backward trajectory (X_cl(s), V_cl(s)).

        Raises:
            AtBounceTime: If s lies within 1e-13 of a bounce time.
        """
        self._check_time(s)
        ell = self.segment_index(s)
        velocity = self.velocities[ell]
        return self.positions[ell] - (self.times[ell] - s) * velocity, velocity.copy()

    def evaluate_many(self, times):
        times = np.asarray(times, dtype=float)
        for s in times:
            self._check_time(s)
        ell = np.count_nonzero(self.times[None, 1:] > times[:, None], axis=1)
        velocities = self.velocities[ell]
        return self.positions[ell] - (self.times[ell] - times)[:, None] * velocities, velocities

    def segment_bounds(self, s: float):
        """Times (t_{l+1}, t_l) of the segment containing s; t_{l+1} may lie below s_min."""
        ell = self.segment_index(s)
        upper = self.times[ell]
        lower = self.times[ell + 1] if ell + 1 < len(self.times) else self.next_bounce_time()
        return lower, upper

    def next_bounce_time(self) -> float:
        """Bounce time following the last stored entry (the first one below s_min)."""
        if "next_time" in self.notes:
            return self.notes["next_time"]
        return float(self.times[-1] - exit_times(self.domain, self.positions[-1], self.velocities[-1]))

    def rows(self):
        """CSV rows (l, t_l, x_l..., v_l..., r_l)."""
        ratios = self.grazing_ratios()
        return [
            [ell, float(t), *map(float, x), *map(float, v), float(r)]
            for ell, (t, x, v, r) in enumerate(zip(self.times, self.positions, self.velocities, ratios))
        ]


def _new_cycle(domain, bc, state, s_min, times, positions, velocities, **notes):
    return Cycle(
        domain=domain, bc=bc,
        times=np.asarray(times, dtype=float),
        positions=np.asarray(positions, dtype=float).reshape(-1, domain.dim),
        velocities=np.asarray(velocities, dtype=float).reshape(-1, domain.dim),
        s_min=s_min, notes=dict(notes),
    )


def exact_gap(radius: float, x) -> float:
    """R^2 - |x|^2 in exact rational arithmetic, rounded once."""
    total = Fraction(radius) ** 2
    for component in np.asarray(x, dtype=float).ravel():
        total -= Fraction(float(component)) ** 2
    return float(total)


def _ball_specular(domain, bc, state: PhaseState, s_min: float, bounce_cap: int) -> Cycle:
    """
    Closed-form specular cycle on a disk or a ball.

    The motion stays in the plane through the center spanned by x and v; in
    that plane the bounce angles advance by the constant 2 phi with
    cos(phi) = L / (R |v|), L the angular momentum.
    """
    radius = domain.radius
    x = state.x
    v = state.v
    speed = float(np.linalg.norm(v))
    if speed == 0:
        return _new_cycle(domain, bc, state, s_min, [state.t], [x], [v])

    if domain.dim == 2:
        e1, e2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    else:
        e1 = v / speed
        perpendicular = x - (x @ e1) * e1
        norm = np.linalg.norm(perpendicular)
        e2 = perpendicular / norm if norm > 1e-14 * radius else tangent_frame(e1)[0]
    p = np.array([x @ e1, x @ e2])
    w = np.array([v @ e1, v @ e2])

    proj = float(p @ w)
    speed2 = float(w @ w)
    chord2 = max(proj * proj + speed2 * exact_gap(radius, x), 0.0)
    chord = math.sqrt(chord2)
    if proj < 0:
        t_b = exact_gap(radius, x) / (chord - proj) if chord - proj > 0 else 0.0
    else:
        t_b = (proj + chord) / speed2
    gap = 2.0 * chord / speed2
    momentum = float(p[0] * w[1] - p[1] * w[0])
    phi = math.atan2(chord, momentum)

    first_time = state.t - t_b
    if first_time < s_min:
        count = 0
    elif gap == 0:
        raise GrazingStall("Grazing state: zero bounce gap")
    else:
        count = int(math.floor((first_time - s_min) / gap)) + 1
    truncated = count > bounce_cap
    count = min(count, bounce_cap)

    ell = np.arange(1, count + 1)
    first = p - t_b * w
    theta = math.atan2(first[1], first[0]) - 2.0 * (ell - 1) * phi
    psi = math.atan2(w[1], w[0]) - 2.0 * ell * phi
    times = np.concatenate([[state.t], first_time - (ell - 1) * gap])
    positions = radius * (np.cos(theta)[:, None] * e1 + np.sin(theta)[:, None] * e2)
    velocities = math.sqrt(speed2) * (np.cos(psi)[:, None] * e1 + np.sin(psi)[:, None] * e2)
    cycle = _new_cycle(
        domain, bc, state, s_min, times,
        np.vstack([x[None], positions]), np.vstack([v[None], velocities]),
        next_time=float(first_time - count * gap), method="analytic",
    )
    if truncated:
        cycle.truncated = True
        raise BounceCapExceeded(f"More than {bounce_cap} bounces above s_min = {s_min}", partial=cycle)
    return cycle


def _bounce_back(domain, bc, state: PhaseState, s_min: float, bounce_cap: int) -> Cycle:
    """Bounce-back cycle: x_l alternates between x^1 and x^2 with a constant gap."""
    x, v = state.x, state.v
    t_b = float(exit_times(domain, x, v))
    first_time = state.t - t_b
    if first_time < s_min:
        return _new_cycle(domain, bc, state, s_min, [state.t], [x], [v], next_time=first_time)
    first = x - t_b * v
    gap = float(exit_times(domain, first, -v))
    second = first + gap * v
    if gap < STALL_TIME:
        raise GrazingStall(f"Bounce-back gap {gap:.3e} below {STALL_TIME}")
    count = int(math.floor((first_time - s_min) / gap)) + 1
    truncated = count > bounce_cap
    count = min(count, bounce_cap)

    ell = np.arange(1, count + 1)
    times = np.concatenate([[state.t], first_time - (ell - 1) * gap])
    positions = np.where((ell % 2 == 1)[:, None], first, second)
    velocities = np.where((ell % 2 == 1)[:, None], -v, v)
    cycle = _new_cycle(
        domain, bc, state, s_min, times,
        np.vstack([x[None], positions]), np.vstack([v[None], velocities]),
        next_time=float(first_time - count * gap), gap=gap,
    )
    if truncated:
        cycle.truncated = True
        raise BounceCapExceeded(f"More than {bounce_cap} bounces above s_min = {s_min}", partial=cycle)
    return cycle


def _boundary_velocity(bc: BoundaryCondition, normal, v, law: DiffuseLaw, bounce: int):
    if bc.kind == BoundaryKind.SPECULAR:
        return specular_reflection(normal, v)
    if bc.kind == BoundaryKind.BOUNCE_BACK:
        return -v
    return sample_diffuse_velocity(law, normal, stream(bc.seed, "diffuse", bc.trajectory_id, bounce))


def _incoming_start(domain: ConvexDomain, bc: BoundaryCondition, state: PhaseState, law: DiffuseLaw):
    """
    Velocity after the boundary condition at x when x is on the boundary and the
    backward ray leaves at once (t_b = 0); None otherwise. Diffuse draws use
    bounce index 0.
    """
    if abs(float(domain.xi(state.x))) > domain.band:
        return None
    slope = float(domain.grad_xi(state.x) @ state.v)
    if slope > 0:
        return None
    if slope == 0:
        raise GrazingStall("Grazing boundary start: zero exit time before and after the boundary condition")
    return _boundary_velocity(bc, outward_normal(domain, state.x), state.v, law, 0)


def _iterate(domain, bc, state: PhaseState, s_min: float, bounce_cap: int, law: DiffuseLaw) -> Cycle:
    times, positions, velocities = [state.t], [state.x], [state.v]
    t_l, x_l, v_l = state.t, state.x, state.v
    stalls = 0
    while True:
        t_b = float(exit_times(domain, x_l, v_l))
        stalls = stalls + 1 if t_b < STALL_TIME else 0
        if stalls >= 2:
            raise GrazingStall()
        t_next = t_l - t_b
        if t_next < s_min:
            break
        if len(times) > bounce_cap:
            partial = _new_cycle(domain, bc, state, s_min, times, positions, velocities)
            partial.truncated = True
            raise BounceCapExceeded(f"More than {bounce_cap} bounces above s_min = {s_min}", partial=partial)
        x_next = x_l - t_b * v_l
        v_next = _boundary_velocity(bc, outward_normal(domain, x_next), v_l, law, len(times))
        times.append(t_next)
        positions.append(x_next)
        velocities.append(v_next)
        t_l, x_l, v_l = t_next, x_next, v_next
    return _new_cycle(domain, bc, state, s_min, times, positions, velocities, next_time=t_next)


def build_cycle(domain: ConvexDomain, bc: BoundaryCondition, state: PhaseState, s_min: float,
                bounce_cap: int = DEFAULT_BOUNCE_CAP, method: str = "auto") -> Cycle:
    """
    Backward cycle of a phase point down to the horizon s_min.

    Args:
        domain (ConvexDomain): The domain.
        bc (BoundaryCondition): Specular, bounce-back or diffuse.
        state (PhaseState): Starting point (t, x, v).
        s_min (float): Horizon; bounces with t_l < s_min are not generated.
        bounce_cap (int, optional): Maximum number of bounces. Defaults to 10^6.
        method (str, optional): "auto" uses the closed forms (specular on
            disks and balls, bounce-back everywhere), "iterative" always steps
            exit time and reflection.

    Raises:
        BounceCapExceeded: More than bounce_cap bounces; carries the partial cycle.
        GrazingStall: Exit time below 1e-13 twice in a row, or a grazing
            start on the boundary.

    Returns:
        Cycle: The bounce sequence. A start on the boundary whose backward ray
        leaves at once gets the boundary condition applied at (t, x): v_0 is
        the resulting velocity and notes["incoming_velocity"] holds v.
    """
    state.validate(domain)
    if s_min > state.t:
        raise ValueError(f"s_min = {s_min} exceeds t = {state.t}")
    if method not in ("auto", "iterative"):
        raise ValueError(f"Unknown cycle method '{method}'")
    law = DiffuseLaw(domain.dim)
    start = state
    incoming = _incoming_start(domain, bc, state, law)
    if incoming is not None:
        start = state.replace(v=incoming)
    if method == "auto" and bc.kind == BoundaryKind.SPECULAR and isinstance(domain, (Sphere, Disk2D)):
        cycle = _ball_specular(domain, bc, start, s_min, bounce_cap)
    elif method == "auto" and bc.kind == BoundaryKind.BOUNCE_BACK:
        cycle = _bounce_back(domain, bc, start, s_min, bounce_cap)
    else:
        cycle = _iterate(domain, bc, start, s_min, bounce_cap, law)
    if incoming is not None:
        cycle.notes["incoming_velocity"] = state.v
    return cycle


def eval_trajectory(cycle: Cycle, s: float):
    return cycle.evaluate(s)


@dataclass
class BounceCount:
    ell_star: int
    ratio: float


def bounce_count(cycle: Cycle, s: float, vl_constant: Optional[float] = None) -> BounceCount:
    """
    Number of bounces l_* with t_{l_*+1} <= s < t_{l_*} and the normalized ratio
    l_* sqrt(alpha) / (|t-s| |v|^2 e^{C |v| (t-s)}).
    """
    ell_star = cycle.segment_index(s)
    elapsed = cycle.t - s
    if ell_star == 0 or elapsed <= 0:
        return BounceCount(ell_star, 0.0)
    if vl_constant is None:
        vl_constant = velocity_lemma_constant(cycle.domain)
    speed = float(np.linalg.norm(cycle.v))
    scale = elapsed * speed ** 2 * math.exp(vl_constant * speed * elapsed)
    return BounceCount(ell_star, ell_star * math.sqrt(alpha(cycle.domain, cycle.x, cycle.v)) / scale)


def bounce_gaps(cycle: Cycle):
    """Pairs (|t_l - t_{l+1}| |v_l|, r_l) for every complete bounce segment."""
    ratios = cycle.grazing_ratios()[1:-1]
    gaps = -np.diff(cycle.times[1:]) * np.linalg.norm(cycle.velocities[1:-1], axis=-1)
    return gaps, ratios


def semigroup_defect(cycle: Cycle, s: float, s_prime: float) -> float:
    """|X(s') - X'(s')| + |V(s') - V'(s')| with X' from the cycle rebuilt at (s, X(s), V(s))."""
    x_s, v_s = cycle.evaluate(s)
    rebuilt = build_cycle(cycle.domain, cycle.bc, PhaseState(s, x_s, v_s), s_min=min(s_prime, s))
    x_a, v_a = cycle.evaluate(s_prime)
    x_b, v_b = rebuilt.evaluate(s_prime)
    return float(np.linalg.norm(x_a - x_b) + np.linalg.norm(v_a - v_b))


# ---------------------------------------------------------------------------- #
#                            Disk polar closed forms                           #
# ---------------------------------------------------------------------------- #

@dataclass
class DiskPolar:
    """Polar data of a disk state: v_n = v.x/r, v_theta = (x x v)/r and chord2 = (x.v)^2 + |v|^2 (R^2 - r^2)."""

    r: float
    theta: float
    v_n: float
    v_theta: float
    speed: float
    chord2: float

    @property
    def absolute_branch_matches(self) -> bool:
        """True when the first-bounce formula written with |v_n| agrees with the exact exit time."""
        return self.v_n >= 0


def disk_polar(state: PhaseState, radius: float = 1.0) -> DiskPolar:
    x, v = state.x, state.v
    r = float(np.linalg.norm(x))
    if r == 0:
        raise CenterDegenerate()
    v_n = float(x @ v) / r
    v_theta = float(x[0] * v[1] - x[1] * v[0]) / r
    chord2 = float(x @ v) ** 2 + float(v @ v) * exact_gap(radius, x)
    return DiskPolar(r=r, theta=math.atan2(x[1], x[0]), v_n=v_n, v_theta=v_theta,
                     speed=float(np.linalg.norm(v)), chord2=chord2)


def disk_specular_cycle(state: PhaseState, s_min: Optional[float] = None, ell_max: int = 100,
                        radius: float = 1.0) -> Cycle:
    """
    Analytic specular cycle on Disk2D(radius).

    t^l = t - (P + (2l-1) sqrt(D)) / |v|^2, theta^l = theta^1 - 2(l-1) phi and
    psi^l = psi^0 - 2 l phi with P = x.v, D = P^2 + |v|^2 (R^2 - |x|^2) and
    cos(phi) = L / (R |v|). The first-bounce formula written with |v_n|
    agrees only on the branch v_n >= 0; the other branch is flagged in the
    cycle notes and logged.

    Raises:
        CenterDegenerate: If x = 0.
    """
    domain = Disk2D(radius)
    incoming = _incoming_start(domain, SPECULAR, state.validate(domain), DiffuseLaw(2))
    if incoming is not None:
        incoming, state = state.v, state.replace(v=incoming)
    polar = disk_polar(state, radius)
    if s_min is None:
        s_min = state.t - (state.x @ state.v + (2 * ell_max - 1) * math.sqrt(polar.chord2)) / polar.speed ** 2
        s_min -= 0.5 * math.sqrt(polar.chord2) / polar.speed ** 2
    cycle = _ball_specular(domain, SPECULAR, state, s_min, DEFAULT_BOUNCE_CAP)
    cycle.notes["absolute_branch_matches"] = polar.absolute_branch_matches
    if incoming is not None:
        cycle.notes["incoming_velocity"] = incoming
    if not polar.absolute_branch_matches:
        logger.warning("disk cycle with v_n = %.3e < 0: the |v_n| form of the first bounce time does not apply",
                       polar.v_n)
    return cycle
