"""Shared fixtures and the acceptance-summary terminal hook."""

from __future__ import annotations

import numpy as np
import pytest

from fapnet.events import EventStream


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def make_stream(
    ts, xs=None, ys=None, ps=None, resolution=(240, 180)
) -> EventStream:
    """Compact stream builder for tests; fills unspecified columns with 0/+1."""
    ts = np.asarray(ts, dtype=np.int64)
    n = len(ts)
    xs = np.zeros(n, dtype=np.int32) if xs is None else np.asarray(xs, dtype=np.int32)
    ys = np.zeros(n, dtype=np.int32) if ys is None else np.asarray(ys, dtype=np.int32)
    ps = np.ones(n, dtype=np.int8) if ps is None else np.asarray(ps, dtype=np.int8)
    return EventStream(ts, xs, ys, ps, resolution)


# -- acceptance criterion reporting -------------------------------------------

_ACCEPTANCE_RESULTS: dict[str, str] = {}


def record_acceptance(name: str, passed: bool) -> None:
    _ACCEPTANCE_RESULTS[name] = "PASS" if passed else "FAIL"


def pytest_runtest_logreport(report):
    if "test_acceptance" not in report.nodeid or report.when != "call":
        return
    name = report.nodeid.split("::")[-1]
    if name not in _ACCEPTANCE_RESULTS:
        _ACCEPTANCE_RESULTS[name] = "PASS" if report.passed else "FAIL"
    elif report.failed:
        _ACCEPTANCE_RESULTS[name] = "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_line("")
    terminalreporter.write_line("acceptance criteria:")
    for name, outcome in sorted(_ACCEPTANCE_RESULTS.items()):
        terminalreporter.write_line(f"  {name}: {outcome}")
