import pytest
import torch

from lak.data import synth_dataset

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def synth200():
    return synth_dataset(seed=1, size=200, num_labels=20, vocab_size=50)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
