"""Collects acceptance-criterion outcomes and prints them after the run."""

import re

import pytest

_ACCEPTANCE: dict[int, str] = {}


def _line(n: int, ok: bool, detail: str) -> str:
    return f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"


@pytest.fixture
def acceptance(request):
    """record(n, ok, detail) stores the one-line verdict for criterion n.

    Tests named test_criterion_<n>_... that end without a verdict are listed as failures.
    """

    def record(n: int, ok: bool, detail: str) -> bool:
        _ACCEPTANCE[n] = _line(n, ok, detail)
        return ok

    yield record
    m = re.match(r"test_criterion_(\d+)", request.node.name)
    if m and int(m.group(1)) not in _ACCEPTANCE:
        _ACCEPTANCE[int(m.group(1))] = _line(int(m.group(1)), False, "raised before reaching a verdict (see traceback)")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[n])
