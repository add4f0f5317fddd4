"""Shared fixtures: every test starts from a clean tape and a seeded RNG."""

import numpy as np
import pytest

from omnirestore.engine import reset_tape


@pytest.fixture(autouse=True)
def clean_tape():
    reset_tape()
    yield
    reset_tape()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
