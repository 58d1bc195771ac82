import pytest

# acceptance outcomes, filled in by tests/test_acceptance.py
ACCEPTANCE: dict = {}


@pytest.fixture
def record_ac():
    def record(name, passed, detail=""):
        ACCEPTANCE[name] = (bool(passed), detail)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda k: int(k.split("-")[1])):
        passed, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{name}: {'PASS' if passed else 'FAIL'}  {detail}")
