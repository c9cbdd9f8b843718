from __future__ import annotations

import pytest

_GATE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def gate():
    """Record one acceptance verdict: ``gate(k, passed, detail)``; also asserts it."""

    def record(k: int, passed: bool, detail: str) -> None:
        _GATE[k] = (bool(passed), detail)
        print(f"criterion {k}: {'PASS' if passed else 'FAIL'} - {detail}")
        assert passed, f"criterion {k} failed: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _GATE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_GATE):
        ok, detail = _GATE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
