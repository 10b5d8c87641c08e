import os

import numpy as np
import pytest
import torch
from hypothesis import settings

from ordloc import data

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")

torch.set_num_threads(max(1, min(4, os.cpu_count() or 1)))


@pytest.fixture(scope="session")
def mnist():
    """MNIST store, ingested from mlxtend's bundled sample when missing."""
    root = data.data_root()
    try:
        return data.MnistSource.load(root)
    except data.MissingSource:
        pytest.importorskip("mlxtend")
        data.ingest_csv(data.bundled_csv_path(), root)
        return data.MnistSource.load(root)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


VERDICTS = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
