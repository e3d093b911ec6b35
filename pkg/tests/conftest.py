import numpy as np
import pytest

from effreg import Dataset

MIX_MU = (0.6, 0.4, 0.0, -2.0, 3.0, 0.6, 0.7)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def linear_data(rng, n=500, beta=(5.0, 1.0, 1.8), sd=1.0):
    x = rng.normal(size=(n, len(beta) - 1))
    y = beta[0] + x @ np.asarray(beta[1:]) + sd * rng.standard_normal(n)
    return Dataset(x, y)
