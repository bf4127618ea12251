from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

from shotmeta.models import init_model
from shotmeta.tasks import PoolSpec, make_pool

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture(scope="session")
def pool():
    return make_pool(PoolSpec())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model():
    return init_model([16, 8, 5], seed=0)


# -- acceptance report -------------------------------------------------------------------
ACCEPTANCE: dict[str, str] = {}
ACCEPTANCE_IDS = [str(i) for i in range(1, 11)]


@pytest.fixture(scope="session")
def acceptance():
    """``record(criterion, passed, detail)``; lines are printed in the terminal summary."""

    def record(criterion: str, passed: bool, detail: str) -> bool:
        ACCEPTANCE[criterion] = f"criterion {criterion:>3}: {'PASS' if passed else 'FAIL'}  {detail}"
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in ACCEPTANCE_IDS + sorted(set(ACCEPTANCE) - set(ACCEPTANCE_IDS)):
        terminalreporter.write_line(ACCEPTANCE.get(key, f"criterion {key:>3}: NOT RUN"))
