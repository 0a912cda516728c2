import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=["numpy", "numba"])
def backend(request):
    return request.param


@pytest.fixture(scope="session")
def toy_index(tmp_path_factory):
    """Four utterances each of the tone and hiss classes (disjoint bands)."""
    from dcsep import toy

    return toy.write_toy_index(tmp_path_factory.mktemp("toy"), 4, seed=7, classes=("tone", "hiss"))
