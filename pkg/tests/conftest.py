import numpy as np
import pytest

from persid.domain import ExperimentalDomain
from persid.lgss import LgssParams

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def box_domain(ids=("p",), m=1, p=1, T=10, lo=-1.0, hi=1.0):
    return ExperimentalDomain(input_dim=m, output_dim=p, input_bounds=[(lo, hi)] * m,
                              horizon=T, policy_family_ids=list(ids))


@pytest.fixture
def scalar_lgss():
    return LgssParams(A=[[0.9]], B=[[1.0]], C=[[1.0]], Q=[[0.1]], R=[[0.1]])


@pytest.fixture
def osc_lgss():
    return LgssParams(A=np.array([[0.8, 0.2], [-0.2, 0.7]]), B=np.array([[1.0], [0.5]]),
                      C=np.array([[1.0, 0.0]]), Q=0.1 * np.eye(2), R=np.array([[0.1]]))
