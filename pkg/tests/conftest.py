import re

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)$")
_results: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    num, name = int(m.group(1)), m.group(2).replace("_", " ")
    if report.when == "call" or report.failed or report.skipped:
        # setup errors and call failures both count against the criterion
        if num not in _results or _results[num][0] == "PASS":
            verdict = "PASS" if report.passed else "SKIP" if report.skipped else "FAIL"
            _results[num] = (verdict, name)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_results):
        verdict, name = _results[num]
        terminalreporter.write_line(f"criterion {num:2d}: {verdict}  {name}")
