"""Re-emit release-gate lines after the run.

The acceptance tests print one ``[PASS]``/``[FAIL]`` line per criterion with
the measured value; pytest captures stdout for passing tests, so those lines
are collected from the captured output here and replayed as a summary block —
a plain ``pytest -v`` run then doubles as the gate report.  (Under ``-s`` the
lines already appear inline and no block is added.)
"""

GATE_LINES: list[str] = []


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    for line in report.capstdout.splitlines():
        if line.startswith(("[PASS]", "[FAIL]")):
            GATE_LINES.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not GATE_LINES:
        return
    terminalreporter.write_sep("-", "release gate")
    for line in GATE_LINES:
        terminalreporter.write_line(line)
