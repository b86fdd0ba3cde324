import dataclasses
import sys

import pytest
import torch

from p3drad.network import TINY, P3DUNet
from p3drad.phantom import PhantomConfig, make_subject

SMALL = PhantomConfig(dims=(16, 32, 32), seed=3, lesion_count_range=(2, 4), lesion_radius_range=(2, 3))


@pytest.fixture(scope="session")
def small_config():
    return SMALL


@pytest.fixture(scope="session")
def sample():
    return make_subject(SMALL)


@pytest.fixture(scope="session")
def samples():
    return [make_subject(dataclasses.replace(SMALL, seed=40 + i)) for i in range(3)]


@pytest.fixture
def tiny_model():
    return P3DUNet(TINY, seed=0)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
