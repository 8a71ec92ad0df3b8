#!/usr/bin/env python3
"""
Shared fixtures for pipeforge tests
"""

import os
import sys

import numpy as np
import pytest

# Add src directory to Python path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from pipeforge.services.data_service import Dataset, Metric, stratified_split  # noqa: E402
from pipeforge.utils import synthetic  # noqa: E402

REPO_ROOT = os.path.join(os.path.dirname(__file__), '..')
BLOBS_CSV = os.path.join(REPO_ROOT, 'data', 'blobs.csv')


@pytest.fixture
def blobs():
    """Separable binary blobs, 150 x 4"""
    return synthetic.blobs(n=150, d=4, k=2, seed=0, spread=1.0)


@pytest.fixture
def blobs_split(blobs):
    return stratified_split(blobs, 0.2, 0)


@pytest.fixture
def balanced_accuracy():
    return Metric.from_name("balanced_accuracy")


@pytest.fixture
def write_csv(tmp_path):
    """Write CSV text to a file in tmp_path and return its path"""

    def _write(text: str, name: str = "data.csv") -> str:
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return str(path)

    return _write


@pytest.fixture
def blobs_csv():
    return BLOBS_CSV


def scaled_numeric(n: int = 40, d: int = 4, seed: int = 0) -> Dataset:
    """Numeric data off the unit scale, two balanced classes"""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d)) * 5.0 + 3.0
    y = np.arange(n) % 2
    return Dataset.from_arrays(X, y)
