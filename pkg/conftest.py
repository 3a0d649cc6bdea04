"""Shared pytest fixtures and the `slow` marker."""

import numpy as np
import pytest

from config import TrainConfig
from sde import CustomDrift, ModelSpec, PointMass, ScalarSigma


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run desk-scale statistical reproductions")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale statistical reproduction, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def zero_sigma(x):
    return np.zeros(x.shape[:-1])


def constant_field(value):
    def field(x):
        return np.full(x.shape, float(value))
    return field


@pytest.fixture
def separable_spec():
    """Two noiseless constant drifts +1 / -1 started at 0."""
    return ModelSpec(
        d=1, num_classes=2,
        drift=CustomDrift((constant_field(1.0), constant_field(-1.0))),
        sigma=ScalarSigma(zero_sigma),
        initial=PointMass((0.0,)),
    )


@pytest.fixture
def quick_train_config():
    return TrainConfig(max_epochs=5, patience=2, batch_size=64, hidden_widths=(8, 8), seed=3)


@pytest.fixture
def tiny_experiment_data(tmp_path):
    """Raw configuration of a sweep that finishes in seconds."""
    return {
        "model": {"preset": "example2", "theta": 4.0},
        "M": 10,
        "train_sizes": [12, 24],
        "size_mode": "balanced",
        "test_size_per_class": 10,
        "repetitions": 2,
        "bayes_reference_paths": 60,
        "rate_window": 2,
        "train": {"max_epochs": 3, "patience": 1, "batch_size": 64, "hidden_widths": [4, 4]},
        "workers": 1,
        "output_dir": str(tmp_path / "results"),
    }


@pytest.fixture(autouse=True)
def single_process_env(monkeypatch):
    """Sweeps in tests run in-process regardless of the caller's environment."""
    monkeypatch.delenv("DRIFTCLASS_THREADS", raising=False)
