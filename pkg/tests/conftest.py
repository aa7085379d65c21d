import sys
from pathlib import Path

import numpy as np
import pytest

TESTS_DIR = Path(__file__).parent
PROJECT_ROOT = TESTS_DIR.parent
sys.path.insert(0, str(TESTS_DIR))  # Allow subdirectories to import utils
sys.path.insert(0, str(PROJECT_ROOT))

from pacsmr.grouping import PipelineConfig  # noqa: E402
from pacsmr.model_selection import SelectionConfig  # noqa: E402
from utils import make_dataset as _make_dataset  # noqa: E402

# Test defaults - a small, strongly instrumented design that fits in milliseconds
TEST_DEFAULTS = {
    "p": 200,
    "beta": (0.5, 0.5, 0.0),
    "strength": 0.05,
    "se_x": 0.01,
    "se_y": 0.01,
    "rho": 0.3,
    "seed": 11,
}

# Small tuning grids so CV-based tests stay quick
FAST_SELECTION = SelectionConfig(grid_points=8, taus=(1.0, 2.0), ridge_points=8, folds=3)
FAST_PIPELINE = PipelineConfig(selection=FAST_SELECTION)


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False,
                     help="Run Monte Carlo acceptance tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running Monte Carlo acceptance test")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def make_dataset():
    """Factory fixture to create datasets with custom settings.

    Usage:
        def test_something(make_dataset):
            ds = make_dataset(p=500, beta=(1.0, 0.0))
            # ds has all TEST_DEFAULTS plus your overrides
    """
    def _make(**overrides):
        settings = {**TEST_DEFAULTS, **overrides}
        return _make_dataset(**settings)
    return _make


@pytest.fixture
def toy_dataset(make_dataset):
    """Three exposures, two equal causal effects, one null."""
    return make_dataset()


@pytest.fixture
def toy_files(tmp_path, toy_dataset):
    """Toy dataset written as TSV + Sigma CSV. Returns (data_path, sigma_path)."""
    from pacsmr.summary_data import write_dataset
    data_path = tmp_path / "toy.tsv"
    sigma_path = tmp_path / "toy_sigma.csv"
    write_dataset(toy_dataset, data_path, sigma_path)
    return data_path, sigma_path


@pytest.fixture
def rng():
    return np.random.default_rng(20240501)


@pytest.fixture
def fast_selection():
    return FAST_SELECTION


@pytest.fixture
def fast_pipeline():
    return FAST_PIPELINE
