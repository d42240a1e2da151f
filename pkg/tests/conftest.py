"""Collects one verdict line per acceptance criterion and prints them at the end of the run."""

from collections import defaultdict

import pytest

_VERDICTS: dict = defaultdict(list)


class AcceptanceLog:
    def record(self, criterion: str, part: str, ok: bool, detail: str = "") -> None:
        _VERDICTS[criterion].append((part, ok, detail))
        print(f"[criterion {criterion}{'/' + part if part else ''}] {'PASS' if ok else 'FAIL'} {detail}")


@pytest.fixture(scope="session")
def acceptance():
    return AcceptanceLog()


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(_VERDICTS, key=lambda c: (len(c), c)):
        parts = _VERDICTS[crit]
        ok = all(p[1] for p in parts)
        detail = "; ".join(f"{name + ': ' if name else ''}{'pass' if good else 'FAIL'} {info}".strip() for name, good, info in parts)
        terminalreporter.write_line(f"criterion {crit}: {'PASS' if ok else 'FAIL'} | {detail}")
