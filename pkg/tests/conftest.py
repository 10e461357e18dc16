import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from exfilt.data import DatasetSchema, TabularDataset, synth_generate

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def small_schema():
    return DatasetSchema.binary(12, 3)


@pytest.fixture
def small_data(small_schema):
    return synth_generate(small_schema, 240, 0.6, seed=11)


def make_dataset(n_features, n_classes, n_rows, seed=0):
    rng = np.random.default_rng(seed)
    schema = DatasetSchema.binary(n_features, n_classes)
    X = rng.integers(0, 2, size=(n_rows, n_features)).astype(float)
    y = rng.integers(0, n_classes, size=n_rows)
    return TabularDataset(X, y, schema)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
