import pytest

_ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def verdict():
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""

    def record(number: int, name: str, passed: bool, detail: str) -> bool:
        _ACCEPTANCE.append(f"{'PASS' if passed else 'FAIL'}  criterion {number:>2} ({name}): {detail}")
        print(_ACCEPTANCE[-1])
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split("criterion")[1].split("(")[0])):
            terminalreporter.write_line(line)
