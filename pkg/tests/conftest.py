import numpy as np
import pytest

from sphdisp.autodiff import RngStream


@pytest.fixture
def rng():
    return RngStream(20240811)


@pytest.fixture
def tiny_pairs():
    return [([5, 6, 7, 8], [9, 10, 11, 12]), ([13, 14, 15], [16, 17, 18])]


def assert_allclose(a, b, tol=1e-9):
    __tracebackhide__ = True
    np.testing.assert_allclose(a, b, rtol=0, atol=tol)
