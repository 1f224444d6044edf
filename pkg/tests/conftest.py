import numpy as np
import pytest

from maskreg.dataset import DesignSet


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_design(rng, n, h, w=None, out=None):
    """Random DesignSet on h x w images (targets of size ``out``, default same)."""
    w = w or h
    oh, ow = out or (h, w)
    X = rng.random((n, h * w))
    T = rng.random((n, oh * ow))
    return DesignSet(X, T, (h, w), (oh, ow))


ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def record(criterion, ok, detail=""):
    """Log an acceptance outcome for the end-of-run summary, then assert it."""
    ACCEPTANCE_RESULTS.append((criterion, bool(ok), detail))
    assert ok, f"{criterion}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {criterion}  {detail}")
