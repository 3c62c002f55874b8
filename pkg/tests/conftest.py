import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))


@pytest.fixture
def f64():
    """Run a test in the 64-bit verification mode."""
    from cropduet.tensor import use_dtype

    with use_dtype(np.float64):
        yield
