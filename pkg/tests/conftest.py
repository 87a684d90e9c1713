import numpy as np
import pytest

from agestruct.model import Grid, ModelSpec


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def small_grid():
    return Grid(2.0, 40, 12)


@pytest.fixture
def logistic():
    """Density-dependent death, constant birth, mildly x-dependent diffusion."""
    return ModelSpec("0.1 + 0.05*x", "0.2 + z", "2")


@pytest.fixture
def logistic_birth():
    """Age-dependent death and saturating birth; nontrivial equilibrium."""
    return ModelSpec("0.1 + 0.05*x", "0.3 + 0.1*a", "3*exp(-0.5*a)/(1+z)")
