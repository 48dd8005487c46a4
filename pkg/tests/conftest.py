import numpy as np
import pytest

from lvharvest.harness import builtin_config
from lvharvest.markov_noise import JumpChainSpec, center_noise
from lvharvest.model import averaged_coeffs


def random_chain(rng, n, centered=True):
    rates = rng.uniform(0.2, 5.0, n)
    K = rng.uniform(0.0, 1.0, (n, n))
    np.fill_diagonal(K, 0.0)
    # a cycle guarantees irreducibility
    for i in range(n):
        K[i, (i + 1) % n] += 0.1
    K /= K.sum(axis=1, keepdims=True)
    spec = JumpChainSpec(states=tuple(range(n)), rates=rates, kernel=K,
                         r1=rng.normal(size=n), r2=rng.normal(size=n))
    return center_noise(spec) if centered else spec


@pytest.fixture(scope="session")
def default_cfg():
    return builtin_config("default")


@pytest.fixture(scope="session")
def default_model(default_cfg):
    spec = center_noise(default_cfg.chain)
    return default_cfg.params, default_cfg.harvest, spec, averaged_coeffs(default_cfg.params, spec)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
