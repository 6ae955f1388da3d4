import numpy as np
import pytest

from qres.model import ModelConfig, QResVAE


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_model():
    return QResVAE(ModelConfig.tiny(), seed=3)


@pytest.fixture(scope="session")
def small_model():
    return QResVAE(ModelConfig.small(), seed=5)


ACCEPTANCE_RESULTS = {}


def record_acceptance(number, passed, detail=""):
    """Store and print one PASS/FAIL line for an acceptance criterion."""
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}".rstrip()
    ACCEPTANCE_RESULTS[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[number])
