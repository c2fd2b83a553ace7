import numpy as np
import pytest

from specshift.cli import default_base
from specshift.io import load_model
from specshift.model import ToyDenoiser


@pytest.fixture(scope="session")
def base_model():
    """The bundled pretrained base model."""
    return load_model(default_base())


@pytest.fixture
def small_model():
    # Narrow random model: cheap forward/backward for gradient checks.
    return ToyDenoiser.init(seed=3, width=8)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
