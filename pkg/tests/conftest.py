import numpy as np
import pytest

from sfmsemval.synthetic import multi_view_model


@pytest.fixture
def small_model():
    return multi_view_model(5, 40, seed=3, camera_model="SIMPLE_RADIAL", extra_keypoints=4)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
