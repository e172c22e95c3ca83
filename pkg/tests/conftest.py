import pytest

_ACCEPTANCE: dict = {}


@pytest.fixture
def criterion():
    """Record the outcome of one acceptance criterion: ``criterion(k, passed, detail)``."""
    def record(number: int, passed: bool, detail: str = ""):
        _ACCEPTANCE[number] = (bool(passed), detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}")
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        passed, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
