import numpy as np
import pytest

from recmoe import Rng


@pytest.fixture
def rng():
    return Rng(12345)


def assert_allclose(actual, desired, tol=1e-12):
    actual = np.asarray(actual, dtype=np.float64)
    desired = np.asarray(desired, dtype=np.float64)
    np.testing.assert_allclose(actual, desired, rtol=0, atol=tol)
