import numpy as np
import pytest

from mcmle import glmm


@pytest.fixture
def desk_design():
    """Small single-random-intercept design used throughout: covariate k/T,
    T=5, so the exact-enumeration oracle applies."""
    return glmm.mcculloch_design(5)


@pytest.fixture
def desk_truth():
    return glmm.GlmmParams(beta=[5.0], delta=[np.sqrt(0.5)])


@pytest.fixture
def null_params(desk_design):
    """beta = 0, delta = 0: the importance ratio is constant in the missing
    data and every marginal is exactly (1/2)^T."""
    return glmm.GlmmParams(beta=np.zeros(desk_design.p), delta=np.zeros(desk_design.r))
