import numpy as np
import pytest

from fmamba import tensor as T


@pytest.fixture(autouse=True)
def _float64():
    # finite-difference checks need double precision; restore whatever a test changed
    with T.default_dtype("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record the outcome of one acceptance criterion; it is printed in the summary."""
    def record(number, ok, detail):
        _CRITERIA.setdefault(number, []).append((bool(ok), detail))
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        parts = _CRITERIA[number]
        ok = all(p for p, _ in parts)
        detail = "; ".join(d for _, d in parts)
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
