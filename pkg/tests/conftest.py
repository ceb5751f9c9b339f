import numpy as np
import pytest

from rklab.chains import ChainSpec, RebirthMeasure, build_chain, path_chain, reference_chain


@pytest.fixture(scope="session")
def ref_chain():
    return reference_chain()


@pytest.fixture(scope="session")
def mu_plus(ref_chain):
    mu = RebirthMeasure(weights={1: 1.0})
    mu.validate(ref_chain)
    return mu


@pytest.fixture(scope="session")
def nonuniform_chain():
    # non-uniform measure to catch density-vs-matrix mixups; rates chosen in
    # detailed balance with m = (2, 0.5, 1)
    m = {-1: 2.0, 0: 0.5, 1: 1.0}
    rates = {(-1, 0): 1.0, (0, -1): 4.0, (0, 1): 2.0, (1, 0): 1.0}
    spec = ChainSpec(states=(-1, 0, 1), rates=rates, measure=m, kill_rate=0.7)
    return build_chain(spec)


@pytest.fixture(scope="session")
def five_path():
    return path_chain((-2, -1, 0, 1, 2), kill_rate=1.0,
                      coords=(-2.0, -1.0, 0.0, 1.0, 2.0))


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20260810)
