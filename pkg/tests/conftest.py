import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def record(number: int, title: str, status: str, detail: str) -> None:
    ACCEPTANCE[number] = (title, status, detail)
    print(f"criterion {number:2d} {status}: {title} | {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, status, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{status}] {n:2d}. {title}: {detail}")
