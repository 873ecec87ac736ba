import numpy as np
import pytest

from rdunet.network import NetworkConfig, build_network


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def desk_model():
    return build_network(NetworkConfig.desk(), seed=0)


@pytest.fixture
def tiny_config():
    """Smallest legal network: 16x16 input, width 4, growth base 1."""
    return NetworkConfig(height=16, width=16, base_width=4, growth_base=1)
