import numpy as np
import pytest

import helpers


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if helpers.ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in helpers.ACCEPTANCE:
            terminalreporter.write_line(line)
