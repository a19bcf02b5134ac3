import logging
import math
from dataclasses import dataclass
from typing import Callable, List, Sequence

import numpy as np

from .quadrature import hermite_expectation, refine_until_stable, shell_integral
from .rng import stream

logger = logging.getLogger(__name__)

MC_BATCH = 100_000
MAXWELLIAN_MASS = (2.0 * math.pi) ** 1.5
GAUSSIAN_CUTOFF = 12.0


class NonFiniteSample(ArithmeticError):
    def __init__(self, message="Non-finite integrand evaluation"):
        super().__init__(message)

class ParameterViolation(ValueError):
    def __init__(self, message="Parameters outside their admissible range"):
        super().__init__(message)


def q0_abs_cos(cosine):
    return np.abs(cosine)


def q0_one(cosine):
    return np.ones_like(cosine)


# name -> (q0, integral of q0 over the unit sphere)
ANGULAR_CUTOFFS = {
    "abs-cos": (q0_abs_cos, 2.0 * math.pi),
    "one": (q0_one, 4.0 * math.pi),
}


def maxwellian(v):
    """mu(v) = e^{-|v|^2/2}"""
    v = np.asarray(v, dtype=float)
    return np.exp(-0.5 * np.sum(v * v, axis=-1))


def sqrt_maxwellian(v):
    v = np.asarray(v, dtype=float)
    return np.exp(-0.25 * np.sum(v * v, axis=-1))


@dataclass(frozen=True)
class CollisionParams:
    kappa: float = 0.0
    q0_name: str = "abs-cos"
    theta_gauss: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.kappa <= 1.0:
            raise ParameterViolation(f"kappa must lie in [0, 1], got {self.kappa}")
        if self.q0_name not in ANGULAR_CUTOFFS:
            raise ParameterViolation(f"unknown angular cutoff '{self.q0_name}' (valid: {', '.join(ANGULAR_CUTOFFS)})")

    @property
    def q0(self) -> Callable:
        return ANGULAR_CUTOFFS[self.q0_name][0]

    @property
    def q0_integral(self) -> float:
        return ANGULAR_CUTOFFS[self.q0_name][1]

    def kernel(self, relative, omega):
        """B(v - u, omega) = |v - u|^kappa q0(cos theta)"""
        speed = np.linalg.norm(relative, axis=-1)
        with np.errstate(invalid="ignore", divide="ignore"):
            cosine = np.where(speed > 0, np.sum(relative * omega, axis=-1) / speed, 0.0)
        return speed ** self.kappa * self.q0(cosine)


@dataclass(frozen=True)
class KernelBound:
    """
    Envelope e^{-rho|v-u|^2 - rho(|v|^2-|u|^2)^2/|v-u|^2} / |v-u|^{2-kappa}
    dominating the linearized collision kernels.
    """

    zeta: float = 0.0
    rho: float = 0.1
    kappa: float = 1.0

    def evaluate(self, v, u):
        v = np.asarray(v, dtype=float)
        u = np.asarray(u, dtype=float)
        distance2 = np.sum((v - u) ** 2, axis=-1)
        energy = np.sum(v * v, axis=-1) - np.sum(u * u, axis=-1)
        return np.exp(-self.rho * distance2 - self.rho * energy ** 2 / distance2) / distance2 ** (1.0 - 0.5 * self.kappa)


def collide(v, u, omega):
    """Post-collisional velocities u' = u + [(v-u).w] w and v' = v - [(v-u).w] w."""
    exchange = np.sum((v - u) * omega, axis=-1, keepdims=True) * omega
    return u + exchange, v - exchange


def _uniform_sphere(rng, n):
    directions = rng.standard_normal((n, 3))
    return directions / np.linalg.norm(directions, axis=-1, keepdims=True)


@dataclass
class MCEstimate:
    estimate: float
    stderr: float
    samples: int

    def z_score(self, reference: float) -> float:
        if self.stderr == 0:
            return 0.0 if self.estimate == reference else math.inf
        return (self.estimate - reference) / self.stderr


def _finite(values, label):
    if not np.all(np.isfinite(values)):
        raise NonFiniteSample(f"{label}: {np.count_nonzero(~np.isfinite(values))} non-finite samples")
    return values


def _paired_samples(sample_fn: Callable, samples: int, seed: int, *keys) -> MCEstimate:
    """Mean and standard error over antithetic pairs drawn batch by batch."""
    pairs = max(samples // 2, 1)
    total, total2, count, batch = 0.0, 0.0, 0, 0
    while count < pairs:
        size = min(MC_BATCH, pairs - count)
        values = sample_fn(stream(seed, *keys, batch), size)
        total += float(np.sum(values))
        total2 += float(np.sum(values * values))
        count += size
        batch += 1
    mean = total / count
    variance = max(total2 / count - mean * mean, 0.0)
    return MCEstimate(mean, math.sqrt(variance / max(count - 1, 1)), 2 * count)


def _gain_weight(u):
    """Inverse N(0, I) density of u times the 4 pi of the uniform omega law."""
    return 4.0 * math.pi * MAXWELLIAN_MASS * np.exp(0.5 * np.sum(u * u, axis=-1))


def gamma_gain(f1: Callable, f2: Callable, v, params: CollisionParams, samples: int = 100_000,
               seed: int = 0, key=0, swap: bool = False) -> MCEstimate:
    """
    Monte Carlo estimate of the gain term
    int int B(v-u, w) sqrt(mu(u)) f1(u') f2(v') dw du.

    u is drawn from N(0, I) in antithetic pairs (u, -u) sharing omega, and
    omega uniformly on the sphere.

    Args:
        f1, f2 (Callable): Vectorized velocity functions (..., 3) -> (...).
        v (array (3,)): Velocity.
        params (CollisionParams): kappa and q0.
        samples (int, optional): Number of (u, omega) samples. Defaults to 10^5.
        seed (int, optional): Stream seed. Defaults to 0.
        key (int | str, optional): Stream key of this velocity. Defaults to 0.
        swap (bool, optional): Evaluate f1(v') f2(u') instead. Defaults to False.

    Raises:
        NonFiniteSample: If an integrand evaluation is not finite.

    Returns:
        MCEstimate: Estimate and standard error.
    """
    if samples < 1000:
        raise ParameterViolation(f"gamma_gain needs at least 1000 samples, got {samples}")
    v = np.asarray(v, dtype=float)

    def sample(rng, n):
        u = rng.standard_normal((n, 3))
        omega = _uniform_sphere(rng, n)
        pair = []
        for signed in (u, -u):
            u_prime, v_prime = collide(v, signed, omega)
            if swap:
                u_prime, v_prime = v_prime, u_prime
            value = _gain_weight(signed) * params.kernel(v - signed, omega) * sqrt_maxwellian(signed) \
                * f1(u_prime) * f2(v_prime)
            pair.append(_finite(value, "gamma_gain"))
        return 0.5 * (pair[0] + pair[1])

    return _paired_samples(sample, samples, seed, "gamma-gain", key)


def nu_loss(f: Callable, v, params: CollisionParams, rtol: float = 1e-6, start: int = 16) -> float:
    """
    Collision frequency int int B(v-u, w) sqrt(mu(u)) f(u) dw du.

    The angular integral is the closed form of q0 over the sphere. For
    kappa = 0 the u-integral is a tensor Gauss-Hermite rule centered at 0;
    otherwise spherical shells around u = v with a Gauss-Jacobi radial rule
    absorb the |v-u|^kappa kink.

    Raises:
        QuadratureDivergence: If refinement does not stabilize to rtol.
    """
    v = np.asarray(v, dtype=float)

    if params.kappa == 0:
        def integrand(u):
            return sqrt_maxwellian(u) * f(u) * np.exp(0.5 * np.sum(u * u, axis=-1))

        def evaluate(n):
            return MAXWELLIAN_MASS * hermite_expectation(integrand, n)
    else:
        def shell_integrand(u):
            return sqrt_maxwellian(u) * f(u)

        speed = float(np.linalg.norm(v))
        axis = v if speed > 0 else None

        def evaluate(n):
            return shell_integral(shell_integrand, v, params.kappa + 2.0, speed + GAUSSIAN_CUTOFF,
                                  n, n, n, axis=axis)

    value = refine_until_stable(evaluate, start, rtol=rtol, atol=1e-300)
    return params.q0_integral * value


@dataclass
class KernelIntegral:
    integral: float
    product_with_bracket_v: float


def kernel_integral_check(v, params: CollisionParams, zeta: float, theta_gauss: float, rho: float = 0.1,
                          rtol: float = 1e-6, start: int = 16) -> KernelIntegral:
    """
    int {|v-u|^kappa + |v-u|^{kappa-2}} e^{-rho|v-u|^2 - rho(|v|^2-|u|^2)^2/|v-u|^2}
        <v>^zeta e^{theta|v|^2} / (<u>^zeta e^{theta|u|^2}) du

    in shells around u = v; the area element cancels the diagonal singularity.

    Raises:
        ParameterViolation: If theta lies outside (-2 rho, 2 rho).
    """
    if not -2.0 * rho < theta_gauss < 2.0 * rho:
        raise ParameterViolation(f"theta = {theta_gauss} outside (-2 rho, 2 rho) = ({-2 * rho}, {2 * rho})")
    v = np.asarray(v, dtype=float)
    kappa = params.kappa
    bracket_v = math.sqrt(1.0 + float(v @ v))
    speed = float(np.linalg.norm(v))

    def integrand(u):
        distance2 = np.sum((u - v) ** 2, axis=-1)
        energy = float(v @ v) - np.sum(u * u, axis=-1)
        bracket_u = np.sqrt(1.0 + np.sum(u * u, axis=-1))
        envelope = np.exp(-rho * distance2 - rho * energy ** 2 / distance2 + theta_gauss * energy)
        # rho^kappa comes from the radial rule, (1 + rho^2) completes both powers
        return (1.0 + distance2) * envelope * (bracket_v / bracket_u) ** zeta

    rho_max = math.sqrt(40.0 / rho)

    def evaluate(n):
        return shell_integral(integrand, v, kappa, rho_max, n, n, n, axis=v if speed > 0 else None)

    integral = refine_until_stable(evaluate, start, rtol=rtol, atol=1e-300)
    return KernelIntegral(integral=integral, product_with_bracket_v=bracket_v * integral)


# ---------------------------------------------------------------------------- #
#                              Collision identities                            #
# ---------------------------------------------------------------------------- #

@dataclass
class EquilibriumResidual:
    v: np.ndarray
    gain: MCEstimate
    oracle: float
    difference: MCEstimate


def equilibrium_residual(v, params: CollisionParams, samples: int, seed: int = 0, key=0) -> EquilibriumResidual:
    """
    Gamma_gain(sqrt mu, sqrt mu)(v) against nu(mu)(v) sqrt(mu(v)), and their
    paired difference on shared samples (zero per sample by energy conservation).
    """
    v = np.asarray(v, dtype=float)
    gain = gamma_gain(sqrt_maxwellian, sqrt_maxwellian, v, params, samples, seed, key)
    oracle = nu_loss(sqrt_maxwellian, v, params) * float(sqrt_maxwellian(v))

    def sample(rng, n):
        u = rng.standard_normal((n, 3))
        omega = _uniform_sphere(rng, n)
        pair = []
        for signed in (u, -u):
            u_prime, v_prime = collide(v, signed, omega)
            weight = _gain_weight(signed) * params.kernel(v - signed, omega) * sqrt_maxwellian(signed)
            gain_part = sqrt_maxwellian(u_prime) * sqrt_maxwellian(v_prime)
            loss_part = sqrt_maxwellian(signed) * sqrt_maxwellian(v)
            pair.append(_finite(weight * (gain_part - loss_part), "equilibrium"))
        return 0.5 * (pair[0] + pair[1])

    difference = _paired_samples(sample, samples, seed, "gamma-gain", key)
    return EquilibriumResidual(v=v, gain=gain, oracle=oracle, difference=difference)


def smooth_perturbation(epsilon: float) -> Callable:
    """F = mu (1 + eps p) with p(v) = (v_1 + 0.5 v_2 v_3 - 0.3 |v|^2) e^{-|v|^2/8}."""

    def density(v):
        v = np.asarray(v, dtype=float)
        speed2 = np.sum(v * v, axis=-1)
        p = (v[..., 0] + 0.5 * v[..., 1] * v[..., 2] - 0.3 * speed2) * np.exp(-speed2 / 8.0)
        return maxwellian(v) * (1.0 + epsilon * p)

    return density


COLLISION_INVARIANTS = {
    "mass": lambda v: np.ones(v.shape[:-1]),
    "momentum_x": lambda v: v[..., 0],
    "momentum_y": lambda v: v[..., 1],
    "momentum_z": lambda v: v[..., 2],
    "energy": lambda v: np.sum(v * v, axis=-1),
}


@dataclass
class MomentResidual:
    name: str
    paired: MCEstimate
    weak_form: float


def moment_residuals(density: Callable, params: CollisionParams, samples: int, seed: int = 0) -> List[MomentResidual]:
    """
    int Q(F, F) psi dv for the collision invariants psi.

    The paired estimator samples (u, v, omega) once and evaluates
    F(u')F(v') - F(u)F(v) per sample; the weak form averages
    psi(u') + psi(v') - psi(u) - psi(v) on the same samples and is zero to
    round-off.
    """
    weight_scale = 4.0 * math.pi * MAXWELLIAN_MASS ** 2
    results = []
    for name, psi in COLLISION_INVARIANTS.items():
        weak = []

        def sample(rng, n, psi=psi, weak=weak):
            u = rng.standard_normal((n, 3))
            v = rng.standard_normal((n, 3))
            omega = _uniform_sphere(rng, n)
            u_prime, v_prime = collide(v, u, omega)
            weight = weight_scale * np.exp(0.5 * (np.sum(u * u, axis=-1) + np.sum(v * v, axis=-1))) \
                * params.kernel(v - u, omega)
            collision = density(u_prime) * density(v_prime) - density(u) * density(v)
            weak.append(float(np.max(np.abs(psi(u_prime) + psi(v_prime) - psi(u) - psi(v)))))
            return _finite(weight * collision * psi(v), "moments")

        paired = _plain_samples(sample, samples, seed, "moments", name)
        results.append(MomentResidual(name=name, paired=paired, weak_form=max(weak)))
    return results


def _plain_samples(sample_fn: Callable, samples: int, seed: int, *keys) -> MCEstimate:
    total, total2, count, batch = 0.0, 0.0, 0, 0
    while count < samples:
        size = min(MC_BATCH, samples - count)
        values = sample_fn(stream(seed, *keys, batch), size)
        total += float(np.sum(values))
        total2 += float(np.sum(values * values))
        count += size
        batch += 1
    mean = total / count
    variance = max(total2 / count - mean * mean, 0.0)
    return MCEstimate(mean, math.sqrt(variance / max(count - 1, 1)), count)


def kernel_scan(speeds: Sequence[float], params: CollisionParams, zeta: float, theta_gauss: float,
                rho: float, rtol: float = 1e-4) -> List[KernelIntegral]:
    """<v> I(v) along v = |v| e_1."""
    return [
        kernel_integral_check(np.array([speed, 0.0, 0.0]), params, zeta, theta_gauss, rho, rtol=rtol)
        for speed in speeds
    ]
