import os

import numpy as np
import pytest
import torch

from fundus_joint.config import desk_preset
from fundus_joint.synth import synth_fundus

torch.set_num_threads(1)
os.environ.setdefault("PYTHONHASHSEED", "0")

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, ok: bool, detail: str) -> str:
    line = f"CRITERION {number:>2}: {'PASS' if ok else 'FAIL'} - {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def samples8():
    return synth_fundus(0, 8, 64)


@pytest.fixture
def desk():
    return desk_preset(seed=0)
