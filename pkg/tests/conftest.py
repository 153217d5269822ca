import numpy as np
import pytest

from tagdiff.mixture import GaussianMixture
from tagdiff.schedule import linear_beta_schedule


def random_mixture(rng, dim=None, k=None):
    dim = dim or int(rng.integers(1, 4))
    k = k or int(rng.integers(1, 5))
    return GaussianMixture(
        rng.dirichlet(np.ones(k)),
        rng.normal(0.0, 3.0, size=(k, dim)),
        rng.uniform(0.3, 2.0, size=k),
    )


def random_schedule(rng, T=None):
    T = T or int(rng.integers(1, 31))
    lo = rng.uniform(1e-3, 0.05)
    return linear_beta_schedule(T, lo, min(0.5, lo + rng.uniform(0.0, 0.4)))


def random_instance(rng):
    gm = random_mixture(rng)
    sch = random_schedule(rng)
    x = rng.normal(0.0, 4.0, size=gm.dim)
    t = int(rng.integers(1, sch.T + 1))
    return gm, sch, x, t


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def toy_config():
    from tagdiff.cli import resolve_config

    return resolve_config("toy")


@pytest.fixture(scope="session")
def toy_models(toy_config):
    """Score model and time predictor trained once per session with the default toy config."""
    from tagdiff.cli import train_toy_models

    return train_toy_models(toy_config)
