import json

import pytest

CRITERIA = range(1, 10)


def pytest_configure(config):
    config._acceptance = {}


@pytest.fixture
def record(request):
    """``record(n, ok, detail)`` logs one acceptance criterion outcome."""

    def _record(n, ok, detail=""):
        request.config._acceptance[n] = (bool(ok), detail)

    return _record


def pytest_terminal_summary(terminalreporter, config):
    res = config._acceptance
    if not res:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in CRITERIA:
        ok, detail = res.get(n, (False, "not run or errored before a verdict"))
        tr.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    out = config.rootpath / "acceptance_results.json"
    out.write_text(json.dumps({str(n): {"pass": ok, "detail": d} for n, (ok, d) in sorted(res.items())}, indent=1) + "\n")
