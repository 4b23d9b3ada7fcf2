import warnings

import numpy as np
import pytest
import torch

from singstyle.synthetic import SynthCorpusConfig, generate_records

torch.use_deterministic_algorithms(True)
torch.set_num_threads(1)


@pytest.fixture(scope="session")
def records():
    return generate_records(SynthCorpusConfig(), seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        yield


_CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def record_criterion():
    """Store one acceptance result; the summary prints one line per criterion."""
    def record(number: int, ok: bool, detail: str):
        _CRITERIA[number] = (bool(ok), detail)
    return record


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: the ten acceptance criteria")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
