import numpy as np
import pytest

from vbgmm.numerics import RngStream


@pytest.fixture
def stream():
    def make(index=0, seed=12345):
        return RngStream(seed, index)
    return make


@pytest.fixture
def np_rng():
    return np.random.default_rng(987654321)
