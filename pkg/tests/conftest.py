from __future__ import annotations

import numpy as np
import pytest
import torch

from taprec.synthmovie import SynthConfig, generate_movie


@pytest.fixture(autouse=True)
def _deterministic_torch():
    torch.manual_seed(0)
    torch.use_deterministic_algorithms(True)
    yield


@pytest.fixture(scope="session")
def small_movie():
    return generate_movie(SynthConfig(n_frames=8, height=32, width=32, n_cells_init=6,
                                      division_rate=0.1, death_rate=0.05, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import summary_lines

    lines = summary_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
