"""Shared fixtures.

The trained-model fixture runs the full default two-phase training once per
session (a few seconds of CPU) and is reused by the training, probe, and
acceptance tests.
"""

import time

import pytest

from tacalab import TrainConfig, default_concepts, run_training


@pytest.fixture(scope="session")
def concepts():
    return default_concepts()


@pytest.fixture(scope="session")
def trained(concepts):
    """Default training run: (model, log rows, wall-clock seconds)."""
    start = time.perf_counter()
    model, log = run_training(TrainConfig(), concepts=concepts)
    elapsed = time.perf_counter() - start
    return model, log, elapsed
