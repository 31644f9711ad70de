import os
import re
import sys

import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

# fixed example streams so reruns see the same cases
settings.register_profile("repo", derandomize=True, deadline=None)
settings.load_profile("repo")

_RESULTS = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one acceptance verdict per test; a test that dies early is logged as FAIL."""
    results = request.config.stash.setdefault(_RESULTS, {})
    number = int(re.search(r"criterion_(\d+)", request.node.name).group(1))
    seen = {}

    def record(ok: bool, detail: str):
        seen["line"] = (bool(ok), detail)
        results[number] = seen["line"]
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    yield record
    if "line" not in seen:
        results[number] = (False, "did not complete (see traceback)")


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
