import numpy as np
import pytest

from uhfflow.algebra import AlgebraParams, LocalOperator


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture
def p2():
    return AlgebraParams(2, 1)


@pytest.fixture
def p3():
    return AlgebraParams(3, 1)


@pytest.fixture
def p2d2():
    return AlgebraParams(2, 2)


@pytest.fixture
def pauli(p2):
    """sigma_x, sigma_z, sigma_x sigma_z and the identity at site 0."""
    sx = LocalOperator.site_word(p2, (0,), 1, 0)
    sz = LocalOperator.site_word(p2, (0,), 0, 1)
    sxz = LocalOperator.site_word(p2, (0,), 1, 1)
    one = LocalOperator.identity(p2)
    return sx, sz, sxz, one
