import re
from collections import defaultdict

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_")
_outcomes = defaultdict(list)


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if m and (report.when == "call" or report.outcome != "passed"):
        _outcomes[int(m.group(1))].append((report.outcome, report))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    from test_acceptance import TITLES

    terminalreporter.section("acceptance criteria")
    for n in sorted(TITLES):
        results = _outcomes.get(n)
        if not results:
            terminalreporter.write_line(f"criterion {n:2d} NOT RUN  {TITLES[n]}")
            continue
        ok = all(outcome == "passed" for outcome, _ in results)
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}     {TITLES[n]}"
        if not ok:
            rep = next(r for o, r in results if o != "passed")
            msg = getattr(rep.longrepr, "reprcrash", None)
            if msg is not None:
                line += f"  ({msg.message.splitlines()[0][:160]})"
        terminalreporter.write_line(line)
