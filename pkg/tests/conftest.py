import numpy as np
import pytest

from triavatar.engine import set_finite_checks


@pytest.fixture(autouse=True)
def _finite_checks():
    # Keep the NaN/Inf tripwire armed for every unit test.
    set_finite_checks(True)
    yield
    set_finite_checks(False)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
