from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import settings

settings.register_profile("sona", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("sona")

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def gen():
    g = torch.Generator()
    g.manual_seed(1234)
    return g


# criterion number -> (passed, one-line detail); filled by test_acceptance.py
_ACCEPTANCE: dict[int, tuple[bool, str]] = {}

CRITERIA = {
    1: "guidance algebra suite",
    2: "diffusion correctness",
    3: "gradient suite",
    4: "metric oracles",
    5: "CLUB oracle",
    6: "end-to-end loss-tier trend",
    7: "guidance trend",
    8: "robustness sweeps",
    9: "reproducibility",
}


@pytest.fixture(scope="session")
def acceptance_log():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, name in CRITERIA.items():
        if num in _ACCEPTANCE:
            ok, detail = _ACCEPTANCE[num]
            terminalreporter.write_line(f"criterion {num} ({name}): {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {num} ({name}): NOT RUN")
