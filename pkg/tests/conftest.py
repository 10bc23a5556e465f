import sys

import pytest
import torch

from cdun import diagnostics


@pytest.fixture(autouse=True)
def _clean_state():
    diagnostics.reset()
    torch.manual_seed(0)
    yield
    diagnostics.reset()


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
