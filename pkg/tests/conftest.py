import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from liteisp.features import build_extractors  # noqa: E402


@pytest.fixture(scope="session")
def ext():
    return build_extractors("stub", seed=0)


@pytest.fixture(scope="session")
def ext64():
    return build_extractors("stub", seed=0).to(torch.float64)


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one pass/fail line for an acceptance criterion: ``criterion(n, ok, detail)``."""

    def record(number: int, ok, detail: str) -> bool:
        status = ok if isinstance(ok, str) else ("PASS" if ok else "FAIL")
        line = f"criterion {number}: {status} - {detail}"
        _CRITERIA[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
