from __future__ import annotations

import math

import numpy as np
import pytest

from beamlab.geometry import make_manifold
from beamlab.verify import geodesic_chart


@pytest.fixture(scope="session")
def flat():
    return make_manifold("euclidean-disk")


@pytest.fixture(scope="session")
def hyperbolic():
    return make_manifold("hyperbolic-disk")


@pytest.fixture(scope="session")
def herglotz():
    return make_manifold("radial-herglotz")


@pytest.fixture(scope="session")
def flat_chart(flat):
    return geodesic_chart(flat, [-1.0, 0.0], [1.0, 0.0], 0.3)


@pytest.fixture(scope="session")
def wide_flat_chart(flat):
    # tube wide enough for the focused beams used by the sweeps
    return geodesic_chart(flat, [-1.0, 0.0], [1.0, 0.0], 2.2, 0.1)


@pytest.fixture(scope="session")
def hyperbolic_chart(hyperbolic):
    return geodesic_chart(hyperbolic, [-0.5, 0.0], [1.0, 0.0], 0.1)


@pytest.fixture(scope="session")
def herglotz_chart(herglotz):
    return geodesic_chart(herglotz, [-1.0, 0.0], [math.cos(0.3), math.sin(0.3)], 0.1)


def gaussian2(center, width):
    c = np.asarray(center, dtype=float)
    return lambda x: np.exp(-np.sum((np.asarray(x) - c) ** 2, axis=-1) / (2 * width**2))
