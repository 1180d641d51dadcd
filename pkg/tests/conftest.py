"""Shared fixtures: seeded generators, small datasets and tiny networks."""

import numpy as np
import pytest

from balnorm.data import synth_blobs
from balnorm.model import build_tinynet


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def positive_batch(rng):
    """A [4, 3, 8, 8] batch of strictly positive activations."""
    return rng.uniform(0.05, 1.0, size=(4, 3, 8, 8))


@pytest.fixture
def tiny_synth():
    return synth_blobs(32, 4, seed=0, size=8)


@pytest.fixture(params=["balnorm", "balnorm-two-pass", "batchnorm", "none"])
def norm_flag(request):
    return request.param


@pytest.fixture
def tinynet():
    return build_tinynet("balnorm", num_classes=4, seed=0)
