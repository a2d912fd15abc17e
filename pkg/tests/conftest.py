import os

import numpy as np
import pytest
import torch
from hypothesis import settings

from privoptics.data import synthesize_toy

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

torch.set_num_threads(1)

# acceptance tests append (name, passed, detail) here; printed at the end of the run
CRITERIA: list = []


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in CRITERIA:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


@pytest.fixture
def record_criterion():
    def record(name: str, ok: bool, detail: str = ""):
        CRITERIA.append((name, bool(ok), detail))
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return record


@pytest.fixture(scope="session")
def tiny_toy():
    return synthesize_toy(40, 3)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
