import numpy as np
import pytest

from reinjectr.corpus import build_corpus, geneval_like_prompts
from reinjectr.mmdit import MMDiTConfig, ToyMMDiT
from reinjectr.simulation import SyntheticTask, TaskSpec, train_toy

ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def corpus():
    return build_corpus(geneval_like_prompts(553, seed=0), train_count=499, test_count=54, seed=0)


@pytest.fixture(scope="session")
def toy_task():
    return SyntheticTask(TaskSpec(), MMDiTConfig())


@pytest.fixture(scope="session")
def trained_toy(toy_task):
    """The pinned-seed recipe: 8 layers, d=32, 2000 Adam steps, seed 0."""
    init = ToyMMDiT.init(MMDiTConfig(seed=0))
    return init, train_toy(init, toy_task, steps=2000, seed=0)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
