import numpy as np
import pytest

from dlip.encoders import l2_normalize


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def unit_rows(rng, *shape):
    return l2_normalize(rng.normal(size=shape))


def random_instance(rng, n=None, k=None, hw=None, d=None):
    """Random unit-vector loss inputs (V, T, P) in float64."""
    n = n or int(rng.integers(1, 9))
    k = k or int(rng.integers(1, 7))
    hw = hw or int(rng.integers(2, 17))
    d = d or int(rng.integers(2, 9))
    v = unit_rows(rng, n, d)
    t = unit_rows(rng, n, k, d)
    p = unit_rows(rng, n, hw, d)
    return v, t, p
