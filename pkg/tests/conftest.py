import numpy as np
import pytest

from multehr import tensor as T


@pytest.fixture(autouse=True)
def _finite_checks():
    """Run every test with the debug finite-output assertion enabled."""
    T.set_debug(True)
    yield
    T.set_debug(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
