import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

_ACCEPTANCE: list = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def report():
    """``report(n, ok, detail)`` prints and records one acceptance line."""

    def _report(n, ok, detail):
        line = f"ACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} - {detail}"
        print(line)
        _ACCEPTANCE.append((n, line))
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
