import logging
import math
from typing import Callable

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.special import roots_jacobi

from .geometry import tangent_frame

logger = logging.getLogger(__name__)


class QuadratureDivergence(ArithmeticError):
    def __init__(self, message="Adaptive quadrature did not stabilize"):
        super().__init__(message)


def gauss_legendre(n: int, a: float, b: float):
    """Nodes and weights of the n-point Gauss-Legendre rule on [a, b]."""
    nodes, weights = leggauss(n)
    half = 0.5 * (b - a)
    return a + half * (nodes + 1.0), half * weights


def gauss_jacobi(n: int, a: float, b: float, left: float = 0.0, right: float = 0.0, absorb: bool = True):
    """
    Gauss-Jacobi rule on [a, b] for the weight (s - a)^left (b - s)^right.

    With absorb=True the weight is divided back out of the returned weights,
    so sum(w * g(s)) approximates the plain integral of g when g behaves like
    (s - a)^left near a and (b - s)^right near b.
    """
    if left <= -1 or right <= -1:
        raise ValueError(f"Jacobi exponents must exceed -1, got ({left}, {right})")
    # scipy's weight is (1 - x)^alpha (1 + x)^beta on [-1, 1]
    nodes, weights = roots_jacobi(n, right, left)
    half = 0.5 * (b - a)
    points = a + half * (nodes + 1.0)
    weights = weights * half ** (1.0 + left + right)
    if absorb:
        weights = weights / ((points - a) ** left * (b - points) ** right)
    return points, weights


def sphere_rule(n_polar: int, n_azimuth: int, axis=None):
    """
    Product rule on the unit sphere: Gauss-Legendre in cos(theta), periodic
    trapezoid in phi. Weights sum to 4 pi.

    Returns:
        (directions (N, 3), weights (N,), cosines (N,)): cosines are taken
        against axis (default e_z).
    """
    cosines, cos_weights = gauss_legendre(n_polar, -1.0, 1.0)
    phi = 2.0 * math.pi * (np.arange(n_azimuth) + 0.5) / n_azimuth
    sines = np.sqrt(1.0 - cosines ** 2)
    local = np.stack([
        np.outer(sines, np.cos(phi)).ravel(),
        np.outer(sines, np.sin(phi)).ravel(),
        np.repeat(cosines, n_azimuth),
    ], axis=-1)
    weights = np.repeat(cos_weights, n_azimuth) * (2.0 * math.pi / n_azimuth)
    if axis is None:
        return local, weights, local[:, 2]
    axis = np.asarray(axis, dtype=float) / np.linalg.norm(axis)
    t1, t2 = tangent_frame(axis)
    directions = local[:, :1] * t1 + local[:, 1:2] * t2 + local[:, 2:] * axis
    return directions, weights, local[:, 2]


def circle_rule(n: int):
    phi = 2.0 * math.pi * (np.arange(n) + 0.5) / n
    return np.stack([np.cos(phi), np.sin(phi)], axis=-1), np.full(n, 2.0 * math.pi / n)


def shell_integral(integrand: Callable, center, radial_power: float, rho_max: float,
                   n_radial: int, n_polar: int, n_azimuth: int, axis=None) -> float:
    """
    Integral over the ball |u - center| <= rho_max in spherical shells around center.

    integrand(u) is vectorized over (..., 3) and multiplied by rho^radial_power;
    the Jacobian rho^2 must be included in radial_power by the caller. The
    polar rule is aligned with axis when given.
    """
    rho, rho_weights = gauss_jacobi(n_radial, 0.0, rho_max, left=radial_power, absorb=False)
    directions, direction_weights, _ = sphere_rule(n_polar, n_azimuth, axis=axis)
    points = np.asarray(center, dtype=float) + rho[:, None, None] * directions[None, :, :]
    values = integrand(points)
    return float(np.einsum("i,j,ij->", rho_weights, direction_weights, values))


def refine_until_stable(evaluate: Callable[[int], float], start: int, rtol: float = 1e-6,
                        atol: float = 0.0, max_doublings: int = 6) -> float:
    """
    Double the resolution until two successive values agree.

    Args:
        evaluate (Callable[[int], float]): Quadrature at a resolution level.
        start (int): Initial resolution.
        rtol (float, optional): Relative agreement. Defaults to 1e-6.
        atol (float, optional): Absolute agreement. Defaults to 0.
        max_doublings (int, optional): Defaults to 6.

    Raises:
        QuadratureDivergence: If no two successive levels agree.

    Returns:
        float: The finest value.
    """
    resolution = start
    previous = evaluate(resolution)
    for _ in range(max_doublings):
        resolution *= 2
        current = evaluate(resolution)
        if abs(current - previous) <= atol + rtol * abs(current):
            logger.debug("quadrature stable at resolution %d: %.17g", resolution, current)
            return current
        previous = current
    raise QuadratureDivergence(
        f"No agreement to rtol={rtol} after {max_doublings} doublings (last two: {previous:.6e})"
    )


def gauss_hermite(n: int):
    """
    Probabilists' Gauss-Hermite rule: sum(w * g(x)) approximates E[g(X)] for X ~ N(0, 1).
    """
    knots, weights = np.polynomial.hermite.hermgauss(n)
    return knots * math.sqrt(2.0), weights / math.sqrt(math.pi)


def hermite_expectation(integrand: Callable, n: int, dim: int = 3) -> float:
    """Tensor Gauss-Hermite approximation of E[integrand(U)] for U ~ N(0, I_dim)."""
    knots, weights = gauss_hermite(n)
    grids = np.meshgrid(*([knots] * dim), indexing="ij")
    points = np.stack(grids, axis=-1).reshape(-1, dim)
    tensor_weights = np.prod(np.stack(np.meshgrid(*([weights] * dim), indexing="ij"), axis=-1).reshape(-1, dim), axis=-1)
    return float(np.sum(tensor_weights * integrand(points)))
