import numpy as np
import pytest

import verdicts


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    if verdicts.LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in verdicts.LINES:
            terminalreporter.write_line(line)
