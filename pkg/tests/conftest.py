import contextlib
import time

import pytest

_RESULTS: dict[int, tuple[str, str, float]] = {}


class _Criterion(contextlib.AbstractContextManager):
    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.details: list[str] = []

    def note(self, text: str) -> None:
        self.details.append(text)

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        detail = "; ".join(self.details)
        if exc is not None:
            detail = (detail + "; " if detail else "") + f"{exc_type.__name__}: {exc}".splitlines()[0]
        _RESULTS[self.number] = (status, f"{self.title}: {detail}", time.perf_counter() - self.start)
        return False


@pytest.fixture
def criterion():
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        status, text, secs = _RESULTS[n]
        terminalreporter.write_line(f"[{status}] criterion {n:2d} ({secs:5.1f}s) {text}")
