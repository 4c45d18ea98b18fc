import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def f64(rng, *shape, lo=-1.0, hi=1.0, requires_grad=True):
    """Random float64 tensor helper used across the gradient checks."""
    from sits_ssm.autodiff import Tensor
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=requires_grad)
