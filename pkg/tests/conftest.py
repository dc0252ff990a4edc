import pytest
import torch

from protoground.scenes import VocabTable, VocabularySplit


@pytest.fixture
def vocab():
    return VocabularySplit.default()


@pytest.fixture
def table():
    return VocabTable()


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_log():
    return _ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
