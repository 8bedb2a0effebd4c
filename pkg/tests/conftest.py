import pytest

_ACCEPTANCE: list[str] = []


@pytest.fixture
def record():
    """Collects one pass/fail line per acceptance criterion for the summary."""
    def _record(number: int, ok: bool, detail: str) -> bool:
        _ACCEPTANCE.append(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        print(_ACCEPTANCE[-1])
        return ok
    return _record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
