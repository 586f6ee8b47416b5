import numpy as np
import pytest

from mclnn.numkernel import Rng

_ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def acceptance_log():
    return _ACCEPTANCE_LINES.append


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_segments(rng, batch, features, frames):
    return rng.normal((batch, features, frames))


@pytest.fixture(scope="session")
def synth_small(tmp_path_factory):
    """Small order-encoded dataset shared by the slower tests."""
    from mclnn.data import synth_generate

    out = tmp_path_factory.mktemp("synth_small")
    return synth_generate(out, classes=4, files_per_class=40, features=20, frames=60, seed=5)


def assert_all_finite(*arrays):
    for a in arrays:
        assert np.all(np.isfinite(a))
