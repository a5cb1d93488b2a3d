import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from disenbooth.synthbench import benchmark_grid, render_batch, train_probes  # noqa: E402


@pytest.fixture(scope="session")
def probes_and_grid():
    grid = benchmark_grid()
    images = render_batch([(s, c) for _, s, c in grid])
    probes = train_probes(images, [s for _, s, _ in grid], [c for _, _, c in grid], seed=0, steps=400)
    return probes, grid, images


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("]")[0].split("[")[1])):
            terminalreporter.write_line(line)
