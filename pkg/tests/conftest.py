"""Collects acceptance-criterion verdicts and prints them after the run."""

import time
from contextlib import contextmanager

import pytest

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


@pytest.fixture
def criterion(request):
    """``with criterion(n, title, budget_s): ...`` times the body and records PASS/FAIL."""
    lines = request.config.stash[_LINES]

    @contextmanager
    def run(n: int, title: str, budget_s: float):
        t0 = time.perf_counter()
        try:
            yield
        except BaseException as exc:
            dt = time.perf_counter() - t0
            lines.append((n, f"criterion {n}: FAIL  {title} ({dt:.2f}s / {budget_s:g}s) {type(exc).__name__}"))
            print(lines[-1][1])
            raise
        dt = time.perf_counter() - t0
        ok = dt < budget_s
        verdict = "PASS" if ok else "FAIL"
        lines.append((n, f"criterion {n}: {verdict}  {title} ({dt:.2f}s / {budget_s:g}s)"))
        print(lines[-1][1])
        assert ok, f"criterion {n} took {dt:.2f}s, budget {budget_s}s"

    return run


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(lines):
        terminalreporter.write_line(line)
