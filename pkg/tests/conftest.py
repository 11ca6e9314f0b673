import numpy as np
import pytest

from siaa.toy import build_toy_pipeline


@pytest.fixture(scope="session")
def toy():
    """Seed-0 toy pipeline: trained detector and surrogate head on separable data."""
    return build_toy_pipeline(seed=0)


@pytest.fixture(scope="session")
def toy_small(toy):
    """Fifty test images (25 per class) for attack-level checks."""
    idx = np.r_[0:25, 100:125]
    return toy.test.subset(idx)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

