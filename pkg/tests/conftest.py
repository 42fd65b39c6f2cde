import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

# (criterion, "PASS"/"FAIL", detail) lines collected by the acceptance suite
ACCEPTANCE: list[tuple[str, str, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for crit, verdict, detail in sorted(ACCEPTANCE, key=lambda r: int(r[0][1:])):
        terminalreporter.write_line(f"{crit} {verdict}: {detail}")
