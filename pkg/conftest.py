"""Shared pytest setup: project root on sys.path and the ``slow`` marker."""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add project to path
sys.path.insert(0, str(Path(__file__).parent))

from models.netlab import SampleSet


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: acceptance-scale runs (minutes)')


@pytest.fixture
def line_samples():
    """Sixteen points on [-1, 1] labelled with sin(πx)."""
    x = np.linspace(-1.0, 1.0, 16)
    return SampleSet(x, np.sin(np.pi * x))


@pytest.fixture
def plane_samples():
    rng = np.random.default_rng(3)
    x = rng.uniform(-1.0, 1.0, size=(12, 2))
    return SampleSet(x, np.cos(x[:, 0]) * x[:, 1])
