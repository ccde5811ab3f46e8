import numpy as np
import pytest

from modweave import mini_config, set_default_dtype


@pytest.fixture
def f64():
    """Run a test in float64, restoring float32 afterwards."""
    set_default_dtype(np.float64)
    try:
        yield
    finally:
        set_default_dtype(np.float32)


@pytest.fixture
def mini():
    return mini_config()
