import re

_RESULTS: dict[int, dict] = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_criterion_(\d+)", report.nodeid)
    if not m:
        return
    k = int(m.group(1))
    entry = _RESULTS.setdefault(k, {"passed": True, "details": []})
    if report.when == "call" or report.outcome == "failed":
        entry["passed"] &= report.outcome == "passed"
    if report.when == "call":
        entry["details"] += [v for name, v in report.user_properties if name == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_RESULTS):
        entry = _RESULTS[k]
        terminalreporter.write_line(f"CRITERION {k}: {'PASS' if entry['passed'] else 'FAIL'}")
        for line in entry["details"]:
            terminalreporter.write_line(f"    {line}")
