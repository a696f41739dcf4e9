import numpy as np
import pytest

from copanet import engine


@pytest.fixture
def f64():
    """Run a test at 64-bit engine precision, restoring the previous setting."""
    prev = engine.precision()
    engine.set_precision(64)
    yield
    engine.set_precision(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
