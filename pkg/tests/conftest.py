import os

import pytest
from hypothesis import HealthCheck, settings

from rconley.boxset import Grid, boxes_meeting_ball, boxes_meeting_box
from rconley.enclosure import FiberedSet, build_enclosure
from rconley.noise import NoiseModel, sample_path
from rconley.systems import affine, random_diagonal, random_logistic

settings.register_profile(
    "default",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

PROPERTY_CASES = 500


@pytest.fixture(scope="session")
def disk_grid():
    return Grid((-1.5, -1.5), (1.5, 1.5), (48, 48))


@pytest.fixture(scope="session")
def contraction(disk_grid):
    path = sample_path(NoiseModel.uniform([0.3, 0.3], [0.7, 0.7]), 0, 16)
    E = build_enclosure(random_diagonal(2), disk_grid, path)
    N = FiberedSet.constant(boxes_meeting_ball(disk_grid, (0, 0), 1.0), 16, path)
    return E, N


@pytest.fixture(scope="session")
def expansion(disk_grid):
    path = sample_path(NoiseModel.uniform([1.5, 1.5], [2.5, 2.5]), 0, 16)
    E = build_enclosure(random_diagonal(2), disk_grid, path)
    N = FiberedSet.constant(boxes_meeting_ball(disk_grid, (0, 0), 1.0), 16, path)
    return E, N


@pytest.fixture(scope="session")
def doubling():
    """1D f(x) = 2x on [-1, 1] with 32 boxes, T = 10."""
    g = Grid((-1.0,), (1.0,), (32,))
    path = sample_path(NoiseModel.constant([0.0]), 0, 10)
    E = build_enclosure(affine([[2.0]]), g, path)
    N = FiberedSet.constant(boxes_meeting_box(g, (-1.0,), (1.0,)), 10, path)
    return E, N


@pytest.fixture(scope="session")
def logistic_grid():
    return Grid((-0.2,), (2.0,), (256,), space_lo=(0.0,))


@pytest.fixture(scope="session")
def logistic(logistic_grid):
    path = sample_path(NoiseModel.uniform([-0.4], [0.4]), 0, 16)
    return build_enclosure(random_logistic(), logistic_grid, path)
