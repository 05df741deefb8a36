import pytest

# criterion name -> (passed or None if skipped, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict[str, tuple[bool | None, str]] = {}


@pytest.fixture
def record():
    def _record(name, passed, detail=""):
        ACCEPTANCE[name] = (None if passed is None else bool(passed), detail)
        return passed
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, (passed, detail) in ACCEPTANCE.items():
        status = "SKIP" if passed is None else "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"{status}  {name}  {detail}".rstrip())
