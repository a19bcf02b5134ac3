"""Boundary regularity checks for kinetic transport in convex domains."""

from .config_classes import ExperimentConfig, load_config
from .geometry import Disk2D, Ellipsoid, PhaseState, QuarticBall, Sphere, from_spec
from .trajectories import BOUNCE_BACK, SPECULAR, BoundaryCondition, BoundaryKind, build_cycle

__all__ = [
    "ExperimentConfig", "load_config",
    "Disk2D", "Ellipsoid", "PhaseState", "QuarticBall", "Sphere", "from_spec",
    "BOUNCE_BACK", "SPECULAR", "BoundaryCondition", "BoundaryKind", "build_cycle",
]
