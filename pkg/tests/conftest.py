import numpy as np
import pytest

from opufid.fiber_model import concatenate, synthesize_fiber
from opufid.ofdr import Challenge


@pytest.fixture(scope="session")
def challenge():
    return Challenge()


@pytest.fixture(scope="session")
def pigtail():
    return synthesize_fiber(0.5, 1000, seed=7)


@pytest.fixture(scope="session")
def key96():
    return np.random.default_rng(2024).integers(0, 2, 96).astype(np.uint8)


@pytest.fixture(scope="session")
def two_span_chain():
    return concatenate([synthesize_fiber(0.6, 1000, 11), synthesize_fiber(0.6, 1000, 12)])


@pytest.fixture(scope="session")
def three_span_chain():
    return concatenate([synthesize_fiber(0.6, 1000, s) for s in (21, 22, 23)])
