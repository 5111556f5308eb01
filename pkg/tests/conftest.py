import numpy as np
import pytest

from conductance_lab.environment import default_spec, generate


def homogeneous(window=(-50, 50), profile=(1.0,), **kw):
    return generate(default_spec("homogeneous", window, profile=tuple(profile), **kw))


def two_range(window=(-50, 50)):
    return homogeneous(window, (1.0, 0.05))


def iid(window=(-600, 600), seed=0, **kw):
    return generate(default_spec("iid-polynomial", window, seed, **kw))


@pytest.fixture(scope="session")
def nn_env():
    return homogeneous((-400, 400))


@pytest.fixture(scope="session")
def two_range_env():
    return two_range((-400, 400))


@pytest.fixture(scope="session")
def iid_env():
    return iid((-3000, 3000), seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
