import os

os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

import numpy as np
import pytest
from hypothesis import settings

from kinhydro.collision import CollisionKernel, build_linearized, build_projector
from kinhydro.velocity import DriftContext, build_grid

settings.register_profile("kinhydro", deadline=None, derandomize=True, max_examples=25)
settings.load_profile("kinhydro")


@pytest.fixture(scope="session")
def cache_dir(tmp_path_factory):
    return str(tmp_path_factory.mktemp("linop-cache"))


@pytest.fixture(scope="session")
def small(cache_dir):
    """Coarse operator with a nonzero drift, cheap enough for per-test use."""
    grid = build_grid(4.5, 8)
    drift = DriftContext(0.1, (0.05, 0.0, 0.0))
    op = build_linearized(drift, CollisionKernel(), grid, cache_dir=cache_dir)
    return grid, drift, op, build_projector(drift, grid)


@pytest.fixture(scope="session")
def desk(cache_dir):
    """Default 12^3 grid at eps = 0.1, |c| = 0.05."""
    grid = build_grid(6.0, 12)
    drift = DriftContext(0.1, (0.05, 0.0, 0.0))
    op = build_linearized(drift, CollisionKernel(), grid, cache_dir=cache_dir)
    return grid, drift, op, build_projector(drift, grid)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
