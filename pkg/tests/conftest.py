import numpy as np
import pytest
import torch
from hypothesis import settings

from mmser.dataset import generate_synthetic

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synthetic_manifest():
    return generate_synthetic(8, 0)


def pytest_terminal_summary(terminalreporter):
    from gate import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES, key=lambda l: int(l.split()[2])):
            terminalreporter.write_line(line)
