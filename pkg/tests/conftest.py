import numpy as np
import pytest

from causalnets import gp
from causalnets.data import TimeGrid, group_by_compound
from causalnets.simulate import simulate_experiment
from causalnets.synth import RatioPool


@pytest.fixture(scope="session")
def grid():
    return TimeGrid(48.0)


@pytest.fixture(scope="session")
def experiment():
    return simulate_experiment(n_genes=30, seed=3)


@pytest.fixture(scope="session")
def fitted(experiment):
    return gp.fit_experiment(group_by_compound(experiment.observations), subsample=20, seed=0)


@pytest.fixture(scope="session")
def pool(fitted, grid):
    return RatioPool(fitted, grid)


@pytest.fixture(scope="session")
def ratios(fitted, grid):
    return gp.summarize_experiment(fitted, grid)[1]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
