"""Collects acceptance verdicts and prints one PASS/FAIL line per criterion."""
from collections import defaultdict

import pytest

VERDICTS = defaultdict(list)  # criterion -> [(part, ok, detail)]


@pytest.fixture
def record():
    def _record(criterion, part, ok, detail):
        VERDICTS[criterion].append((part, bool(ok), detail))
        print(f"criterion {criterion}{part}: {'PASS' if ok else 'FAIL'} {detail}")
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for c in sorted(VERDICTS):
        parts = VERDICTS[c]
        ok = all(p[1] for p in parts)
        detail = "; ".join(f"{p[0] or 'all'}={'ok' if p[1] else 'FAIL'} {p[2]}" for p in parts)
        tr.write_line(f"{c:>2} {'PASS' if ok else 'FAIL'}  {detail}")
