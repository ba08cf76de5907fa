import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ice.backends.synthetic import SyntheticBackend, make_world
from ice.learning import TrainSchedule, run_learning
from ice.localization import LocalizationConfig, localize
from ice.losses import sinkhorn_cost
from ice.losses.ot import grid_ground_cost


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    """Trigger numba JIT once so timed tests measure the algorithm."""
    C = grid_ground_cost(2, 2)
    sinkhorn_cost(np.array([0.6, 0.2, 0.1, 0.1]), np.array([0.25, 0.25, 0.25, 0.25]), C)


@pytest.fixture(scope="session")
def world3():
    return make_world(seed=7, num_shapes=3)


@pytest.fixture()
def backend3(world3):
    return SyntheticBackend(world3)


@pytest.fixture(scope="session")
def localized3(world3):
    backend = SyntheticBackend(world3)
    return localize(world3.image, backend.retrieve_concepts, backend.segment, LocalizationConfig())


@pytest.fixture(scope="session")
def trained_run(world3, localized3):
    """Full default-schedule training run, shared by the expensive tests."""
    backend = SyntheticBackend(world3)
    schedule = TrainSchedule(seed=0)
    start = time.perf_counter()
    state = run_learning(localized3, world3.image, backend, schedule=schedule)
    elapsed = time.perf_counter() - start
    return {"state": state, "backend": backend, "world": world3, "loc": localized3, "elapsed": elapsed}
