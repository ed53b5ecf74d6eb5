"""Collects one PASS/FAIL line per acceptance criterion and prints them after the run."""

import contextlib
import time

import pytest

N_CRITERIA = 10
_results: dict[int, tuple[str, str]] = {}
_ran_acceptance = False


class _Criterion:
    def __init__(self):
        self.notes: list[str] = []

    def note(self, text: str) -> None:
        self.notes.append(text)


@pytest.fixture
def criterion():
    """``with criterion(n, title) as c: ...``; records FAIL if the block raises."""
    global _ran_acceptance
    _ran_acceptance = True

    @contextlib.contextmanager
    def run(n: int, title: str):
        c = _Criterion()
        t0 = time.perf_counter()
        try:
            yield c
        except BaseException as e:
            first = str(e).strip().splitlines()[0] if str(e).strip() else type(e).__name__
            c.note(f"error: {first[:200]}")
            _results[n] = ("FAIL", _line(title, c, t0))
            raise
        _results[n] = ("PASS", _line(title, c, t0))

    return run


def _line(title, c, t0):
    notes = "; ".join(c.notes)
    return f"{title} [{time.perf_counter() - t0:.1f}s]" + (f" | {notes}" if notes else "")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ran_acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        status, text = _results.get(n, ("FAIL", "not run"))
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {text}")
