from pathlib import Path

import numpy as np
import pytest

from mcsplat.verify import random_scene

DATA = Path(__file__).parent / "data"
TEST_IMAGE = DATA / "astronaut64.png"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def scene2d(rng):
    return random_scene(rng, 16, size=16, dim=2)


@pytest.fixture
def scene3d(rng):
    return random_scene(rng, 16, size=16, dim=3)


def pytest_terminal_summary(terminalreporter):
    module = __import__("sys").modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
