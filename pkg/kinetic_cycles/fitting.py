import logging
from dataclasses import dataclass, asdict
from typing import List, Optional, Tuple

import numpy as np
from scipy.stats import linregress

logger = logging.getLogger(__name__)

MIN_FIT_POINTS = 6


class FitError(ValueError):
    def __init__(self, message="Not enough valid points for a scaling fit"):
        super().__init__(message)


@dataclass
class ScalingFit:
    """Slope of log10(quantity) against log10(alpha) with its standard error."""

    exponent: float
    intercept: float
    r2: float
    stderr: float
    alpha_range: Tuple[float, float]
    points: int

    def within(self, target: float, tolerance: float) -> bool:
        return abs(self.exponent - target) <= tolerance

    def as_dict(self) -> dict:
        return asdict(self)


def _valid(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    keep = np.isfinite(x) & np.isfinite(y) & (x > 0) & (y > 0)
    return x[keep], y[keep]


def fit_power_law(x, y, min_points: int = MIN_FIT_POINTS, x_range: Optional[Tuple[float, float]] = None) -> ScalingFit:
    """
    Least-squares fit of log10(y) = exponent * log10(x) + intercept.

    Non-positive and non-finite points are dropped before fitting.

    Raises:
        FitError: If fewer than min_points valid points remain.
    """
    x, y = _valid(x, y)
    if x_range is not None:
        keep = (x >= x_range[0]) & (x <= x_range[1])
        x, y = x[keep], y[keep]
    if x.size < min_points:
        raise FitError(f"{x.size} valid points, need {min_points}")
    result = linregress(np.log10(x), np.log10(y))
    return ScalingFit(
        exponent=float(result.slope),
        intercept=float(result.intercept),
        r2=float(result.rvalue ** 2),
        stderr=float(result.stderr),
        alpha_range=(float(x.min()), float(x.max())),
        points=int(x.size),
    )


def local_slopes(x, y) -> np.ndarray:
    """Pointwise log-log slopes between consecutive points."""
    x, y = _valid(x, y)
    order = np.argsort(x)
    return np.diff(np.log(y[order])) / np.diff(np.log(x[order]))


def tail_fits(x, y, windows: int = 3, min_points: int = MIN_FIT_POINTS) -> List[ScalingFit]:
    """
    Fits on nested ranges that tighten toward the smallest x.

    The first fit uses every point; each further fit drops the largest
    decade fraction so the last one keeps only min_points points.
    """
    x, y = _valid(x, y)
    order = np.argsort(x)
    x, y = x[order], y[order]
    counts = np.unique(np.linspace(x.size, min_points, windows).astype(int))[::-1]
    return [fit_power_law(x[:count], y[:count], min_points=min_points) for count in counts if count >= min_points]


def tails_consistent(fits: List[ScalingFit], tolerance: float) -> bool:
    """True when tightening the range toward 0 never raises the slope by more than tolerance."""
    return all(later.exponent <= earlier.exponent + tolerance for earlier, later in zip(fits, fits[1:]))


@dataclass
class LinearFit:
    slope: float
    intercept: float
    slope_stderr: float


def linear_fit(x, y) -> LinearFit:
    result = linregress(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
    return LinearFit(float(result.slope), float(result.intercept), float(result.stderr))


def spread(values) -> float:
    """max/min of positive finite values (inf if empty)."""
    values = np.asarray(values, dtype=float)
    values = values[np.isfinite(values) & (values > 0)]
    if values.size == 0:
        return np.inf
    return float(values.max() / values.min())
