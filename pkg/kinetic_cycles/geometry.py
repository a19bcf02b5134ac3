import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)

GRAZING_BAND = 1e-12
GRADIENT_FLOOR = 1e-12
NEWTON_ITERATIONS = 100
BISECTION_ITERATIONS = 200


class DegenerateGradient(ArithmeticError):
    def __init__(self, message="Gradient of the level-set function vanishes (|grad xi| <= 1e-12)"):
        super().__init__(message)

class NoExit(ValueError):
    def __init__(self, message="Zero velocity: the backward ray never leaves the domain"):
        super().__init__(message)

class NotOnBoundary(ValueError):
    def __init__(self, message="Position is not on the boundary within the tolerance band"):
        super().__init__(message)

class OutsideDomain(ValueError):
    def __init__(self, message="Position lies outside the closed domain"):
        super().__init__(message)

class DomainValidationError(ValueError):
    def __init__(self, message="Domain failed its construction checks"):
        super().__init__(message)


class DomainKind(str, Enum):
    SPHERE = "sphere"
    ELLIPSOID = "ellipsoid"
    DISK2D = "disk"
    QUARTIC_BALL = "quartic"
    CUSTOM = "custom"


class ConvexDomain(ABC):
    """
    Strictly convex domain {xi < 0} given by a level-set function.

    All derivative methods are vectorized over leading axes: a position array
    of shape (..., dim) yields xi of shape (...), the gradient (..., dim), the
    Hessian (..., dim, dim) and the third derivative (..., dim, dim, dim).
    """

    kind = DomainKind.CUSTOM
    boundary_band: float = 1e-10

    @property
    @abstractmethod
    def dim(self) -> int: ...

    @property
    @abstractmethod
    def c_xi(self) -> float: ...

    @property
    @abstractmethod
    def bounding_radius(self) -> float:
        """Radius of a ball around the origin containing the closed domain."""

    @abstractmethod
    def xi(self, x): ...

    @abstractmethod
    def grad_xi(self, x): ...

    @abstractmethod
    def hess_xi(self, x): ...

    @abstractmethod
    def third_xi(self, x): ...

    @property
    def scale(self) -> float:
        return self.bounding_radius

    @property
    def diameter(self) -> float:
        return 2.0 * self.bounding_radius

    @property
    def is_quadratic(self) -> bool:
        return False

    @property
    def band(self) -> float:
        return self.boundary_band * self.scale

    def third_contract(self, x, v):
        """sum_ijk v_i v_j v_k d_ijk xi(x)"""
        return np.einsum("...ijk,...i,...j,...k->...", self.third_xi(x), v, v, v)

    def third_derivative_bound(self) -> Optional[float]:
        """Supremum over the closed domain of |third_contract(x, w)| for unit w, if known."""
        return None

    def exit_time_constants(self) -> Optional[Tuple[float, float]]:
        """Constants (c1, c2) with c1 sqrt(alpha)/|v|^2 <= t_b <= c2 sqrt(alpha)/|v|^2 on outgoing boundary states."""
        return None

    def describe(self) -> str:
        return self.kind.value


class _Quadric(ConvexDomain):
    """xi(x) = sum_i A_i x_i^2 - offset"""

    _coefficients: Tuple[float, ...]
    _offset: float

    @property
    def dim(self) -> int:
        return len(self._coefficients)

    @property
    def c_xi(self) -> float:
        return 2.0 * min(self._coefficients)

    @property
    def is_quadratic(self) -> bool:
        return True

    def xi(self, x):
        x = np.asarray(x, dtype=float)
        return np.sum(np.asarray(self._coefficients) * x * x, axis=-1) - self._offset

    def grad_xi(self, x):
        x = np.asarray(x, dtype=float)
        return 2.0 * np.asarray(self._coefficients) * x

    def hess_xi(self, x):
        x = np.asarray(x, dtype=float)
        hess = np.diag(2.0 * np.asarray(self._coefficients))
        return np.broadcast_to(hess, x.shape[:-1] + hess.shape).copy()

    def third_xi(self, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (self.dim,) * 3)

    def third_contract(self, x, v):
        return np.zeros(np.broadcast_shapes(np.shape(x), np.shape(v))[:-1])

    def third_derivative_bound(self) -> float:
        return 0.0

    def exit_time_constants(self) -> Tuple[float, float]:
        # t_b = 2 sqrt(alpha) / (v.H.v) exactly for quadratic xi
        return 1.0 / max(self._coefficients), 1.0 / min(self._coefficients)


@dataclass(frozen=True)
class Sphere(_Quadric):
    radius: float = 1.0
    boundary_band: float = 1e-10
    kind = DomainKind.SPHERE

    def __post_init__(self):
        if self.radius <= 0:
            raise DomainValidationError(f"Sphere radius must be positive, got {self.radius}")

    @property
    def _coefficients(self):
        return (1.0, 1.0, 1.0)

    @property
    def _offset(self):
        return self.radius ** 2

    @property
    def bounding_radius(self) -> float:
        return self.radius

    def describe(self) -> str:
        return f"sphere({self.radius:g})"


@dataclass(frozen=True)
class Disk2D(_Quadric):
    radius: float = 1.0
    boundary_band: float = 1e-10
    kind = DomainKind.DISK2D

    def __post_init__(self):
        if self.radius <= 0:
            raise DomainValidationError(f"Disk radius must be positive, got {self.radius}")

    @property
    def _coefficients(self):
        return (1.0, 1.0)

    @property
    def _offset(self):
        return self.radius ** 2

    @property
    def bounding_radius(self) -> float:
        return self.radius

    def describe(self) -> str:
        return f"disk({self.radius:g})"


@dataclass(frozen=True)
class Ellipsoid(_Quadric):
    a: float = 2.0
    b: float = 1.0
    c: float = 1.0
    boundary_band: float = 1e-10
    kind = DomainKind.ELLIPSOID

    def __post_init__(self):
        if min(self.a, self.b, self.c) <= 0:
            raise DomainValidationError(f"Ellipsoid semi-axes must be positive, got {(self.a, self.b, self.c)}")

    @property
    def _coefficients(self):
        return (1.0 / self.a ** 2, 1.0 / self.b ** 2, 1.0 / self.c ** 2)

    @property
    def _offset(self):
        return 1.0

    @property
    def bounding_radius(self) -> float:
        return max(self.a, self.b, self.c)

    def describe(self) -> str:
        return f"ellipsoid({self.a:g},{self.b:g},{self.c:g})"


@dataclass(frozen=True)
class QuarticBall(ConvexDomain):
    """xi(x) = |x|^2 + lam * sum_i x_i^4 - 1, Hessian >= 2 Id."""

    lam: float = 0.1
    boundary_band: float = 1e-10
    kind = DomainKind.QUARTIC_BALL

    def __post_init__(self):
        if self.lam < 0:
            raise DomainValidationError(f"QuarticBall needs lam >= 0, got {self.lam}")

    @property
    def dim(self) -> int:
        return 3

    @property
    def c_xi(self) -> float:
        return 2.0

    @property
    def bounding_radius(self) -> float:
        return 1.0

    @property
    def is_quadratic(self) -> bool:
        return self.lam == 0

    def xi(self, x):
        x = np.asarray(x, dtype=float)
        x2 = x * x
        return np.sum(x2, axis=-1) + self.lam * np.sum(x2 * x2, axis=-1) - 1.0

    def grad_xi(self, x):
        x = np.asarray(x, dtype=float)
        return 2.0 * x + 4.0 * self.lam * x ** 3

    def hess_xi(self, x):
        x = np.asarray(x, dtype=float)
        diagonal = 2.0 + 12.0 * self.lam * x * x
        hess = np.zeros(x.shape + (3,))
        idx = np.arange(3)
        hess[..., idx, idx] = diagonal
        return hess

    def third_xi(self, x):
        x = np.asarray(x, dtype=float)
        third = np.zeros(x.shape + (3, 3))
        idx = np.arange(3)
        third[..., idx, idx, idx] = 24.0 * self.lam * x
        return third

    def third_contract(self, x, v):
        return 24.0 * self.lam * np.sum(np.asarray(x) * np.asarray(v) ** 3, axis=-1)

    def third_derivative_bound(self) -> float:
        # sum_i x_i w_i^3 <= max|x_i| sum|w_i|^3 <= 1 on the unit ball
        return 24.0 * self.lam

    def exit_time_constants(self) -> Tuple[float, float]:
        return 2.0 / (2.0 + 12.0 * self.lam), 1.0

    def describe(self) -> str:
        return f"quartic({self.lam:g})"


@dataclass(frozen=True)
class CustomDomain(ConvexDomain):
    """
    Domain from user supplied analytic derivatives.

    The callables must be vectorized over leading axes. The construction runs
    a convexity scan and a finite-difference cross-check of the derivatives.
    """

    dimension: int
    xi_fn: Callable
    grad_fn: Callable
    hess_fn: Callable
    third_fn: Callable
    convexity: float
    radius: float
    boundary_band: float = 1e-10
    check_samples: int = 256
    kind = DomainKind.CUSTOM

    def __post_init__(self):
        validate_domain(self, samples=self.check_samples, fd_check=True)

    @property
    def dim(self) -> int:
        return self.dimension

    @property
    def c_xi(self) -> float:
        return self.convexity

    @property
    def bounding_radius(self) -> float:
        return self.radius

    def xi(self, x):
        return np.asarray(self.xi_fn(np.asarray(x, dtype=float)), dtype=float)

    def grad_xi(self, x):
        return np.asarray(self.grad_fn(np.asarray(x, dtype=float)), dtype=float)

    def hess_xi(self, x):
        return np.asarray(self.hess_fn(np.asarray(x, dtype=float)), dtype=float)

    def third_xi(self, x):
        return np.asarray(self.third_fn(np.asarray(x, dtype=float)), dtype=float)


BUILTIN_DOMAINS = {
    "sphere": (Sphere, 1),
    "disk": (Disk2D, 1),
    "ellipsoid": (Ellipsoid, 3),
    "quartic": (QuarticBall, 1),
}


def from_spec(name: str, params=()) -> ConvexDomain:
    """
    Build a builtin domain from its CLI name and parameter list.

    Args:
        name (str): One of "sphere", "disk", "ellipsoid", "quartic".
        params (sequence of float): Constructor parameters; empty means defaults.

    Raises:
        KeyError: Unknown domain name.
        DomainValidationError: Wrong parameter count or failed construction checks.

    Returns:
        ConvexDomain: The constructed domain.
    """
    try:
        cls, count = BUILTIN_DOMAINS[name.lower()]
    except KeyError:
        raise KeyError(f"Unknown domain '{name}', valid domains: {', '.join(BUILTIN_DOMAINS)}") from None
    params = tuple(float(p) for p in params)
    if params and len(params) != count:
        raise DomainValidationError(f"Domain '{name}' takes {count} parameter(s), got {len(params)}")
    domain = cls(*params)
    validate_domain(domain, samples=128)
    return domain


# ---------------------------------------------------------------------------- #
#                                   Sampling                                   #
# ---------------------------------------------------------------------------- #

def sample_interior(domain: ConvexDomain, rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniform samples of the open domain by rejection from the bounding cube."""
    radius = domain.bounding_radius
    points = np.empty((0, domain.dim))
    while len(points) < n:
        candidates = rng.uniform(-radius, radius, size=(2 * n + 16, domain.dim))
        points = np.concatenate([points, candidates[domain.xi(candidates) < 0]])
    return points[:n]


def sample_directions(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    directions = rng.standard_normal((n, dim))
    return directions / np.linalg.norm(directions, axis=-1, keepdims=True)


def sample_boundary(domain: ConvexDomain, rng: np.random.Generator, n: int) -> np.ndarray:
    """Boundary points hit by rays from the origin in uniformly random directions."""
    directions = sample_directions(rng, n, domain.dim)
    origins = np.zeros_like(directions)
    t_b = exit_times(domain, origins, -directions)
    return project_to_boundary(domain, t_b[:, None] * directions)


def sample_ball(rng: np.random.Generator, n: int, dim: int, radius: float) -> np.ndarray:
    """Uniform samples of the ball |v| <= radius."""
    directions = sample_directions(rng, n, dim)
    radii = radius * rng.uniform(size=n) ** (1.0 / dim)
    return directions * radii[:, None]


# ---------------------------------------------------------------------------- #
#                              Normals and frames                              #
# ---------------------------------------------------------------------------- #

def outward_normal(domain: ConvexDomain, x):
    """
    Unit outward normal grad xi / |grad xi|.

    Raises:
        DegenerateGradient: If |grad xi| <= 1e-12 at any of the positions.
    """
    grad = domain.grad_xi(x)
    norm = np.linalg.norm(grad, axis=-1, keepdims=True)
    if np.any(norm <= GRADIENT_FLOOR):
        raise DegenerateGradient()
    return grad / norm


def tangent_frame(n):
    """
    Orthonormal tangent vectors completing the unit normals n.

    Returns a tuple of dim-1 arrays shaped like n. In 3D uses the branchless
    construction of Duff et al.; in 2D the rotation by +90 degrees.
    """
    n = np.asarray(n, dtype=float)
    if n.shape[-1] == 2:
        return (np.stack([-n[..., 1], n[..., 0]], axis=-1),)
    nx, ny, nz = n[..., 0], n[..., 1], n[..., 2]
    sign = np.where(nz >= 0, 1.0, -1.0)
    a = -1.0 / (sign + nz)
    b = nx * ny * a
    t1 = np.stack([1.0 + sign * nx * nx * a, sign * b, -sign * nx], axis=-1)
    t2 = np.stack([b, sign + ny * ny * a, -ny], axis=-1)
    return t1, t2


def project_to_boundary(domain: ConvexDomain, x, iterations: int = 3):
    """Newton steps along the gradient onto {xi = 0}."""
    x = np.array(x, dtype=float)
    for _ in range(iterations):
        grad = domain.grad_xi(x)
        x = x - (domain.xi(x) / np.sum(grad * grad, axis=-1))[..., None] * grad
    return x


# ---------------------------------------------------------------------------- #
#                                  Exit times                                  #
# ---------------------------------------------------------------------------- #

def _check_inside(domain: ConvexDomain, xi_values):
    if np.any(xi_values > domain.band):
        raise OutsideDomain(f"Position outside the domain: xi = {np.max(xi_values):.3e}")


def _quadric_roots(domain: _Quadric, x, v, xi0, slope):
    coefficients = np.asarray(domain._coefficients)
    a = np.sum(coefficients * v * v, axis=-1)
    disc = np.maximum(slope * slope - 4.0 * a * xi0, 0.0)
    root = np.sqrt(disc)
    with np.errstate(divide="ignore", invalid="ignore"):
        positive_slope = (slope + root) / (2.0 * a)
        negative_slope = 2.0 * xi0 / (slope - root)
    return np.where(slope >= 0, positive_slope, negative_slope)


def _line_values(domain: ConvexDomain, x, v, s):
    points = x - s[..., None] * v
    return domain.xi(points), -np.sum(domain.grad_xi(points) * v, axis=-1)


def _lower_bracket(domain, x, v, hi, boundary):
    """Point of the open chord for states on the boundary (xi(x - s v) < 0)."""
    lo = np.zeros_like(hi)
    if not np.any(boundary):
        return lo
    trial = hi.copy()
    found = ~boundary
    for _ in range(80):
        values, _ = _line_values(domain, x, v, trial)
        newly = ~found & (values < 0)
        lo = np.where(newly, trial, lo)
        found |= newly
        if np.all(found):
            break
        trial = np.where(found, trial, 0.5 * trial)
    return lo


def _newton_roots(domain, x, v, lo, hi):
    """
    Safeguarded Newton from the far end of the bracket.

    xi is convex along the line, so Newton from the right of the larger root
    decreases monotonically onto it; steps leaving the bracket fall back to
    bisection.
    """
    s = hi.copy()
    tolerance = 1e-14 * domain.scale ** 2
    active = np.ones(s.shape, dtype=bool)
    for _ in range(NEWTON_ITERATIONS):
        values, derivatives = _line_values(domain, x, v, s)
        hi = np.where(active & (values > 0), s, hi)
        lo = np.where(active & (values <= 0), s, lo)
        done = (np.abs(values) <= tolerance) | (hi - lo <= 1e-16 * np.maximum(hi, 1e-300))
        active &= ~done
        if not np.any(active):
            break
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = s - values / derivatives
        safe = (derivatives > 0) & (newton > lo) & (newton < hi)
        s = np.where(active, np.where(safe, newton, 0.5 * (lo + hi)), s)
    return s


def _bisection_roots(domain, x, v, lo, hi):
    for _ in range(BISECTION_ITERATIONS):
        mid = 0.5 * (lo + hi)
        values, _ = _line_values(domain, x, v, mid)
        hi = np.where(values > 0, mid, hi)
        lo = np.where(values > 0, lo, mid)
        if np.all(hi - lo <= 1e-16 * np.maximum(hi, 1e-300)):
            break
    return 0.5 * (lo + hi)


def exit_times(domain: ConvexDomain, x, v, method: str = "auto") -> np.ndarray:
    """
    Vectorized backward exit times t_b(x, v) = inf{s > 0 : x - s v outside}.

    Args:
        domain (ConvexDomain): The domain.
        x (array (..., dim)): Positions in the closed domain.
        v (array (..., dim)): Non-zero velocities.
        method (str): "auto" (closed form on quadrics, Newton otherwise),
            "newton" or "bisection".

    Raises:
        NoExit: Some velocity is zero.
        OutsideDomain: Some position lies outside the tolerance band.

    Returns:
        numpy.ndarray: Exit times of shape (...). Boundary states whose
        velocity does not point back into the domain get 0.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    x, v = np.broadcast_arrays(x, v)
    speed2 = np.sum(v * v, axis=-1)
    if np.any(speed2 == 0):
        raise NoExit()

    xi0 = domain.xi(x)
    _check_inside(domain, xi0)
    slope = np.sum(domain.grad_xi(x) * v, axis=-1)
    boundary = np.abs(xi0) <= domain.band
    leaving = boundary & (slope <= 0)

    if method == "auto" and isinstance(domain, _Quadric):
        t_b = _quadric_roots(domain, x, v, xi0, slope)
    elif method in ("auto", "newton", "bisection"):
        hi = (domain.diameter + np.sqrt(speed2)) / np.sqrt(speed2)
        lo = _lower_bracket(domain, x, v, hi, boundary & ~leaving)
        if method == "bisection":
            t_b = _bisection_roots(domain, x, v, lo, hi)
        else:
            t_b = _newton_roots(domain, x, v, lo, hi)
    else:
        raise ValueError(f"Unknown exit-time method '{method}'")

    return np.where(leaving, 0.0, t_b)


@dataclass(frozen=True, eq=False)
class ExitData:
    t_b: float
    x_b: np.ndarray
    normal_at_exit: np.ndarray
    incidence: float


def backward_exit_time(domain: ConvexDomain, x, v, method: str = "auto") -> ExitData:
    """
    Backward exit time and footpoint of one phase point.

    x_b = x - t_b v holds exactly; the incidence n(x_b).v is <= 0 up to rounding.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    t_b = float(exit_times(domain, x, v, method=method))
    x_b = x - t_b * v
    normal = outward_normal(domain, x_b)
    return ExitData(t_b=t_b, x_b=x_b, normal_at_exit=normal, incidence=float(normal @ v))


# ---------------------------------------------------------------------------- #
#                                 Phase states                                 #
# ---------------------------------------------------------------------------- #

def bracket(v):
    """<v> = sqrt(1 + |v|^2)"""
    v = np.asarray(v, dtype=float)
    return np.sqrt(1.0 + np.sum(v * v, axis=-1))


@dataclass(frozen=True, eq=False)
class PhaseState:
    t: float
    x: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float))
        if self.x.shape != self.v.shape:
            raise ValueError(f"Position and velocity shapes differ: {self.x.shape} vs {self.v.shape}")

    @property
    def bracket(self) -> float:
        return float(bracket(self.v))

    @property
    def speed(self) -> float:
        return float(np.linalg.norm(self.v))

    def validate(self, domain: ConvexDomain) -> "PhaseState":
        if self.x.shape[-1] != domain.dim:
            raise ValueError(f"State of dimension {self.x.shape[-1]} on a {domain.dim}D domain")
        _check_inside(domain, domain.xi(self.x))
        return self

    def replace(self, **changes) -> "PhaseState":
        values = {"t": self.t, "x": self.x, "v": self.v}
        values.update(changes)
        return PhaseState(**values)


# ---------------------------------------------------------------------------- #
#                            Boundary classification                           #
# ---------------------------------------------------------------------------- #

class GammaTag(str, Enum):
    INCOMING = "incoming"
    OUTGOING = "outgoing"
    GRAZING = "grazing"
    NEAR_GRAZING_OR_FAST = "near_grazing_or_fast"


@dataclass(frozen=True)
class GammaRegion:
    tag: GammaTag
    eps: Optional[float] = None


def classify(domain: ConvexDomain, x, v, eps: float) -> GammaRegion:
    """
    Classify a boundary phase point into incoming, grazing, outgoing or the
    almost grazing / fast part of the outgoing set.

    Raises:
        NotOnBoundary: If |xi(x)| exceeds the boundary band.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    if abs(float(domain.xi(x))) > domain.band:
        raise NotOnBoundary(f"|xi(x)| = {abs(float(domain.xi(x))):.3e} exceeds the boundary band")
    incidence = float(outward_normal(domain, x) @ v)
    if incidence < -GRAZING_BAND:
        return GammaRegion(GammaTag.INCOMING)
    if abs(incidence) <= GRAZING_BAND:
        return GammaRegion(GammaTag.GRAZING)
    if incidence < eps or np.linalg.norm(v) > 1.0 / eps:
        return GammaRegion(GammaTag.NEAR_GRAZING_OR_FAST, eps)
    return GammaRegion(GammaTag.OUTGOING)


# ---------------------------------------------------------------------------- #
#                              Construction checks                             #
# ---------------------------------------------------------------------------- #

def _fd_mismatch(exact, fn, x, h):
    """Largest relative mismatch between an analytic derivative and central FD of fn."""
    worst = 0.0
    for i in range(x.shape[-1]):
        step = np.zeros(x.shape[-1])
        step[i] = h
        approx = (fn(x + step) - fn(x - step)) / (2 * h)
        reference = exact[..., i]
        scale = np.max(np.abs(reference)) + 1.0
        worst = max(worst, float(np.max(np.abs(approx - reference)) / scale))
    return worst


def validate_domain(domain: ConvexDomain, samples: int = 256, seed: int = 0, fd_check: bool = False) -> None:
    """
    Convexity scan and gradient-band check on sampled points of the closed domain.

    Raises:
        DomainValidationError: On a convexity or gradient violation, or on a
            failed finite-difference derivative cross-check (fd_check).
    """
    rng = np.random.default_rng(seed)
    radius = domain.bounding_radius
    points = rng.uniform(-radius, radius, size=(8 * samples, domain.dim))
    points = points[domain.xi(points) <= 0][:samples]
    if len(points) == 0:
        raise DomainValidationError(f"{domain.describe()}: no sample point inside the domain")

    eigenvalues = np.linalg.eigvalsh(domain.hess_xi(points))
    if np.min(eigenvalues) < domain.c_xi * (1.0 - 1e-9):
        raise DomainValidationError(
            f"{domain.describe()}: Hessian eigenvalue {np.min(eigenvalues):.3e} below c_xi = {domain.c_xi}"
        )

    directions = sample_directions(rng, samples, domain.dim)
    lo = np.zeros(samples)
    hi = np.full(samples, radius)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        inside = domain.xi(mid[:, None] * directions) < 0
        lo = np.where(inside, mid, lo)
        hi = np.where(inside, hi, mid)
    gradients = np.linalg.norm(domain.grad_xi(lo[:, None] * directions), axis=-1)
    if np.min(gradients) <= GRADIENT_FLOOR:
        raise DomainValidationError(f"{domain.describe()}: vanishing gradient near the boundary")

    if fd_check:
        h = 1e-5 * radius
        x = points[: min(16, len(points))]
        mismatch = max(
            _fd_mismatch(domain.grad_xi(x), domain.xi, x, h),
            _fd_mismatch(domain.hess_xi(x), domain.grad_xi, x, h),
            _fd_mismatch(domain.third_xi(x), domain.hess_xi, x, h),
        )
        if mismatch > 1e-5:
            raise DomainValidationError(f"{domain.describe()}: derivative FD cross-check mismatch {mismatch:.2e}")
        logger.debug("%s: derivative cross-check mismatch %.2e", domain.describe(), mismatch)
