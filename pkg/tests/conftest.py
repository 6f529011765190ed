import numpy as np
import pytest

from fiem.models.gmm import GmmModel, generate_gmm_synthetic, initial_parameters
from fiem.models.toy_gaussian import ToyGaussianModel, generate_toy
from fiem.utils.rng import StreamFactory


@pytest.fixture
def small_toy():
    """Toy model with n=12 and dims (y, p, q) = (4, 3, 5)."""
    return ToyGaussianModel(generate_toy(7, 12, y_dim=4, p_dim=3, q_dim=5))


@pytest.fixture
def tiny_toy():
    """The n=10, q=3 configuration of the descent-inequality check."""
    return ToyGaussianModel(generate_toy(3, 10, y_dim=3, p_dim=2, q_dim=3))


@pytest.fixture
def gmm_data():
    dataset, truth = generate_gmm_synthetic(11, 300, 3, 2, separation=4.0)
    return dataset, truth


@pytest.fixture
def gmm_model(gmm_data):
    dataset, _ = gmm_data
    theta0 = initial_parameters(dataset, 3, StreamFactory(0).stream("init"))
    return GmmModel(dataset, 3, theta0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
