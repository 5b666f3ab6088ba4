"""
tests/conftest.py
Shared small-scale fixtures: a six-mode Neumann space, an eight-step grid,
three jump marks and the three coefficient models on top of them.
"""

import numpy as np
import pytest

from tools.models import make_harvesting_model, make_lq_model, make_random_bounded_model
from tools.noise import JumpMeasureSpec, TimeGrid, sample_batch
from tools.regression import RegressionBasis
from tools.spectral import build_spectral_space

N_W = 4
D_OBS = 1


@pytest.fixture
def space():
    return build_spectral_space(6)


@pytest.fixture
def grid():
    return TimeGrid(T=1.0, n_steps=8)


@pytest.fixture
def jm():
    return JumpMeasureSpec(marks=(0.1, 0.2, 0.3), weights=(1.0, 0.5, 0.25))


@pytest.fixture
def lq_model(space, jm):
    return make_lq_model(space, N_W, D_OBS, jm)


@pytest.fixture
def rb_model(space, jm):
    return make_random_bounded_model(space, N_W, D_OBS, jm, seed=7)


@pytest.fixture
def harvesting_model(space, jm):
    return make_harvesting_model(space, N_W, D_OBS, jm)


@pytest.fixture
def make_batch(grid, jm):
    """Factory for noise ensembles that match the fixture models."""
    def _make(M=400, seed=11, n_W=N_W, d=D_OBS, g=None, measure=None):
        return sample_batch(g or grid, n_W, d, measure or jm, seed=seed, M=M)
    return _make


@pytest.fixture
def basis():
    return RegressionBasis()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
