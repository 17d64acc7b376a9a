import numpy as np
import pytest

from varsel_engine.net_core import NetworkArch, NetworkWeights, Dataset
from varsel_engine.rng import stream_rng


def random_network(depth, width, input_dim, seed=0, scale=1.0):
    """iid N(0, scale²) 权重的随机网络"""
    arch = NetworkArch(depth=depth, width=width, input_dim=input_dim)
    return NetworkWeights.sample_prior(arch, scale, stream_rng(seed, "test-net"))


def random_inputs(n, P, seed=0):
    return stream_rng(seed, "test-inputs").uniform(size=(n, P))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def toy_net():
    """L=1, K=2, P=2：W1=[[1,0],[0,-1]], β=(1,1)"""
    return NetworkWeights(W1=[[1.0, 0.0], [0.0, -1.0]], beta=[1.0, 1.0], b0=0.0)


@pytest.fixture
def small_net():
    return random_network(2, 4, 3, seed=7)


@pytest.fixture
def small_data(small_net):
    X = random_inputs(12, 3, seed=3)
    y = stream_rng(3, "test-y").normal(size=12)
    return Dataset(X=X, y=y, noise_sd=0.5)
