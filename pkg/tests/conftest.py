import re

CRITERIA = {
    1: "gradient suite",
    2: "oracle suite",
    3: "sampling statistics",
    4: "learning test",
    5: "fine-tuning from pre-trained init",
    6: "grid vs region benchmark",
    7: "image-size speedup and token counts",
    8: "determinism and persistence",
}

_results: dict = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d)_", report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.when == "call" or report.failed:
        prev = _results.get(n)
        if prev is None or prev[0] == "PASS":
            _results[n] = ("PASS" if report.passed else "FAIL", dict(report.user_properties))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, name in CRITERIA.items():
        if n not in _results:
            continue
        status, props = _results[n]
        detail = "; ".join(f"{k}={v}" for k, v in props.items())
        tr.write_line(f"[{status}] criterion {n}: {name}" + (f" ({detail})" if detail else ""))
