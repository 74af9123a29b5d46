"""Prints one PASS/FAIL line per acceptance criterion at the end of the run.

Acceptance tests attach a human-readable measurement with
``record_property("detail", ...)``; it is echoed next to the verdict.
"""

import re


def _criterion_rows(stats):
    rows = {}
    for outcome in ("passed", "failed", "error"):
        for rep in stats.get(outcome, []):
            if "test_acceptance.py" not in getattr(rep, "nodeid", ""):
                continue
            if outcome != "error" and rep.when != "call":
                continue
            m = re.search(r"test_criterion_(\d+)", rep.nodeid)
            if not m:
                continue
            detail = dict(rep.user_properties).get("detail", "")
            verdict = "PASS" if outcome == "passed" else "FAIL"
            rows[int(m.group(1))] = (verdict, rep.nodeid.split("::")[-1], detail)
    return rows


def pytest_terminal_summary(terminalreporter):
    rows = _criterion_rows(terminalreporter.stats)
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(rows):
        verdict, name, detail = rows[num]
        terminalreporter.write_line(f"[{verdict}] criterion {num} ({name}): {detail}")
