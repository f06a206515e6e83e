import numpy as np
import pytest

from fusionseg.config import RunConfig
from fusionseg.data import build_dataset, ingest_slices


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    build_dataset(10, 7, out)
    return out


@pytest.fixture(scope="session")
def tiny_ds(tiny_dir):
    return ingest_slices(tiny_dir)


@pytest.fixture
def tiny_cfg():
    return RunConfig(seed=3, patch=32, batch=4, epochs_pretrain=1, epochs_fusion=1)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
