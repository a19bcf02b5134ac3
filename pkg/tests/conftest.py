import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from kinetic_cycles.config_classes import ExperimentConfig
from kinetic_cycles.geometry import Disk2D, Ellipsoid, QuarticBall, Sphere

settings.register_profile(
    "kinetic",
    max_examples=50,
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("kinetic")


BUILTIN_DOMAINS = {
    "sphere": Sphere(),
    "disk": Disk2D(),
    "ellipsoid": Ellipsoid(),
    "quartic": QuarticBall(),
}


@pytest.fixture(params=sorted(BUILTIN_DOMAINS))
def domain(request):
    return BUILTIN_DOMAINS[request.param]


@pytest.fixture
def sphere():
    return Sphere(1.0)


@pytest.fixture
def disk():
    return Disk2D(1.0)


@pytest.fixture
def quartic():
    return QuarticBall(0.1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config(tmp_path):
    """Default configuration writing into a temporary directory, without a time budget."""
    config = ExperimentConfig()
    config.run.out = str(tmp_path / "out")
    config.run.budget_seconds = 0.0
    return config


@pytest.fixture
def interior_state():
    """Draws an interior position at least 0.05 deep and a velocity of the given speed."""

    def draw(domain, rng, speed=1.0):
        while True:
            x = rng.uniform(-domain.bounding_radius, domain.bounding_radius, domain.dim)
            if domain.xi(x) < -0.05:
                break
        v = rng.standard_normal(domain.dim)
        return x, speed * v / np.linalg.norm(v)

    return draw
