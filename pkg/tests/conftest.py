"""Prints one status line per acceptance criterion after the run."""


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = []
    for status, label in (("passed", "PASS"), ("failed", "FAIL"),
                          ("error", "FAIL")):
        for rep in terminalreporter.stats.get(status, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" in nodeid:
                lines.append((nodeid.split("::")[-1], label))
    if lines:
        terminalreporter.section("acceptance criteria")
        for name, label in sorted(lines):
            terminalreporter.write_line(f"{label} {name}")
