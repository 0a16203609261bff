import pytest

_LINES = []


class AcceptanceLog:
    def record(self, number: int, ok: bool, detail: str) -> None:
        _LINES.append((number, ok, detail))
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}")


@pytest.fixture(scope="session")
def acceptance_log():
    return AcceptanceLog()


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(_LINES, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
