import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import ConvexDomain, OutsideDomain, bracket, sample_ball, sample_interior
from .rng import stream

logger = logging.getLogger(__name__)

ALPHA_ROUNDOFF = 1e-14      # relative to |v|^4
ALPHA_FLOOR = 1e-14         # ratio tests, relative to |v|^4
VARPI_ALPHA_FLOOR = 1e-8
VARPI_SAFETY = 1.1
CALIBRATION_PERCENTILE = 99.9
CALIBRATION_SAFETY = 1.2


class GrazingDegenerate(ArithmeticError):
    def __init__(self, message="Kinetic distance below the grazing floor, ratio undefined"):
        super().__init__(message)


def _as_scalar(value):
    return float(value) if np.ndim(value) == 0 else value


def alpha(domain: ConvexDomain, x, v):
    """
    Kinetic distance |v.grad xi|^2 - 2 (v.hess xi.v) xi, vectorized.

    Round-off negatives down to -1e-14 |v|^4 are clamped to 0.

    Raises:
        OutsideDomain: If xi(x) exceeds the boundary band.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    xi = domain.xi(x)
    if np.any(xi > domain.band):
        raise OutsideDomain(f"alpha evaluated outside the domain: xi = {np.max(xi):.3e}")
    normal_part = np.sum(v * domain.grad_xi(x), axis=-1)
    curvature = np.einsum("...i,...ij,...j->...", v, domain.hess_xi(x), v)
    value = normal_part ** 2 - 2.0 * curvature * xi
    speed4 = np.sum(v * v, axis=-1) ** 2
    value = np.where((value < 0) & (value >= -ALPHA_ROUNDOFF * speed4), 0.0, value)
    return _as_scalar(value)


def transport_derivative_alpha(domain: ConvexDomain, x, v):
    """v.grad_x alpha = -2 (v v v : third xi) xi"""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    xi = domain.xi(x)
    if np.any(xi > domain.band):
        raise OutsideDomain()
    return _as_scalar(-2.0 * domain.third_contract(x, v) * xi)


@dataclass
class VarpiEstimate:
    value: float
    samples: int
    skipped: int
    max_quotient: float
    argmax_x: Optional[np.ndarray] = None
    argmax_v: Optional[np.ndarray] = None


def estimate_varpi(domain: ConvexDomain, sample_count: int, seed: int = 0, v_max: float = 5.0) -> VarpiEstimate:
    """
    Monte Carlo estimate of the decay-rate threshold with its sample-max location.

    The quotient |v.grad alpha| / (alpha <v>) is maximized over uniform (x, v)
    with x in the domain and |v| <= v_max; samples with alpha below 1e-8 are
    skipped and counted. The returned value carries a 1.1 safety factor.
    """
    if sample_count < 1:
        raise ValueError(f"sample_count must be >= 1, got {sample_count}")
    if domain.is_quadratic:
        return VarpiEstimate(value=0.0, samples=sample_count, skipped=0, max_quotient=0.0)

    rng = stream(seed, "varpi", domain.describe())
    x = sample_interior(domain, rng, sample_count)
    v = sample_ball(rng, sample_count, domain.dim, v_max)
    alphas = alpha(domain, x, v)
    keep = alphas > VARPI_ALPHA_FLOOR
    skipped = int(np.count_nonzero(~keep))
    if skipped:
        logger.debug("varpi: skipped %d samples below the alpha floor", skipped)
    if not np.any(keep):
        return VarpiEstimate(value=0.0, samples=sample_count, skipped=skipped, max_quotient=0.0)

    # v -> -v flips the sign of the numerator, so the sample max uses |.|
    quotient = np.abs(transport_derivative_alpha(domain, x[keep], v[keep])) / (alphas[keep] * bracket(v[keep]))
    best = int(np.argmax(quotient))
    return VarpiEstimate(
        value=VARPI_SAFETY * float(quotient[best]),
        samples=sample_count,
        skipped=skipped,
        max_quotient=float(quotient[best]),
        argmax_x=x[keep][best],
        argmax_v=v[keep][best],
    )


def varpi_threshold(domain: ConvexDomain, sample_count: int, seed: int = 0, v_max: float = 5.0) -> float:
    return estimate_varpi(domain, sample_count, seed=seed, v_max=v_max).value


def weighted_distance(domain: ConvexDomain, t, x, v, varpi: float):
    """e^{-varpi <v> t} alpha(x, v)"""
    return _as_scalar(np.exp(-varpi * bracket(v) * np.asarray(t, dtype=float)) * alpha(domain, x, v))


@dataclass
class KineticWeight:
    alpha: float
    varpi: float
    weighted: float
    vl_constant: float


def velocity_lemma_constant(domain: ConvexDomain) -> float:
    """
    Analytic rate C with e^{-C|v||s1-s2|} <= alpha(s2)/alpha(s1) <= e^{C|v||s1-s2|}.

    Along free flight |v.grad alpha| <= 2 T |v|^3 |xi| and alpha >= 2 c_xi |v|^2 |xi|,
    where T bounds the third derivative on unit vectors, so C = T / c_xi.

    Raises:
        ValueError: For domains without a known third-derivative bound; use
            calibrate_velocity_constant on a calibration run instead.
    """
    bound = domain.third_derivative_bound()
    if bound is None:
        raise ValueError(f"{domain.describe()}: no analytic velocity-lemma constant, calibrate it")
    return bound / domain.c_xi


def calibrate_velocity_constant(implied_rates) -> float:
    """99.9th percentile of calibration-run implied rates, times 1.2."""
    rates = np.asarray(implied_rates, dtype=float)
    rates = rates[np.isfinite(rates)]
    if rates.size == 0:
        raise ValueError("No finite implied rates to calibrate from")
    return CALIBRATION_SAFETY * float(np.percentile(rates, CALIBRATION_PERCENTILE))


def kinetic_weight(domain: ConvexDomain, t, x, v, varpi: Optional[float] = None,
                   vl_constant: Optional[float] = None) -> KineticWeight:
    if varpi is None:
        varpi = 0.0 if domain.is_quadratic else varpi_threshold(domain, 10_000)
    if vl_constant is None:
        vl_constant = velocity_lemma_constant(domain)
    return KineticWeight(
        alpha=alpha(domain, x, v),
        varpi=varpi,
        weighted=weighted_distance(domain, t, x, v, varpi),
        vl_constant=vl_constant,
    )


@dataclass
class VelocityLemmaCertificate:
    s1: float
    s2: float
    alpha1: float
    alpha2: float
    ratio: float
    implied_rate: float
    vl_constant: float
    passed: bool


def velocity_lemma_certificate(domain: ConvexDomain, cycle, s1: float, s2: float,
                               vl_constant: Optional[float] = None) -> VelocityLemmaCertificate:
    """
    Two-sided exponential control of alpha between two times of one trajectory.

    Args:
        domain (ConvexDomain): The domain of the cycle.
        cycle (Cycle): A specular or bounce-back cycle covering s1 and s2.
        s1, s2 (float): Evaluation times.
        vl_constant (float, optional): Frozen rate; defaults to the analytic constant.

    Raises:
        GrazingDegenerate: If alpha(s1) < 1e-14 |v|^4.

    Returns:
        VelocityLemmaCertificate: ratio alpha(s2)/alpha(s1) and the implied rate.
    """
    x1, v1 = cycle.evaluate(s1)
    x2, v2 = cycle.evaluate(s2)
    alpha1 = alpha(domain, x1, v1)
    alpha2 = alpha(domain, x2, v2)
    speed = float(np.linalg.norm(v1))
    if alpha1 < ALPHA_FLOOR * speed ** 4:
        raise GrazingDegenerate(f"alpha(s1) = {alpha1:.3e} below the grazing floor")
    if vl_constant is None:
        vl_constant = velocity_lemma_constant(domain)

    ratio = alpha2 / alpha1
    log_ratio = abs(np.log(ratio)) if ratio > 0 else np.inf
    elapsed = speed * abs(s1 - s2)
    implied_rate = log_ratio / elapsed if elapsed > 0 else 0.0
    # 1e-9 absorbs round-off in alpha for the rate-0 quadratic case
    passed = bool(log_ratio <= vl_constant * elapsed + 1e-9)
    return VelocityLemmaCertificate(
        s1=s1, s2=s2, alpha1=alpha1, alpha2=alpha2, ratio=ratio,
        implied_rate=implied_rate, vl_constant=vl_constant, passed=passed,
    )


def alpha_bound_constant(domain: ConvexDomain, sample_count: int, seed: int = 0) -> float:
    """Sample maximum of alpha(x, v) / |v|^2 over the domain and unit velocities."""
    rng = stream(seed, "alpha-bound", domain.describe())
    x = sample_interior(domain, rng, sample_count)
    v = sample_ball(rng, sample_count, domain.dim, 1.0)
    speed2 = np.sum(v * v, axis=-1)
    keep = speed2 > 1e-12
    return float(np.max(alpha(domain, x[keep], v[keep]) / speed2[keep]))


def weighted_monotonicity_excess(domain: ConvexDomain, cycle, varpi: float, times) -> float:
    """
    Largest log excess of e^{-varpi<v>(t-s)} alpha(s) over its value at s = t.

    For varpi above the threshold the weighted distance does not grow going
    backward in time, so the result is <= 0 up to round-off.
    """
    t = cycle.t
    reference = alpha(domain, cycle.x, cycle.v)
    weight = bracket(cycle.v)
    excess = -np.inf
    for s in times:
        x, v = cycle.evaluate(s)
        value = np.exp(-varpi * weight * (t - s)) * alpha(domain, x, v)
        excess = max(excess, float(np.log(value / reference)))
    return excess
