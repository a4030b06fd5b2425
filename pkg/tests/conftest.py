import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from trimanual.kincore import load_chains  # noqa: E402

_ACCEPTANCE = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = {}


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion; printed at session end."""
    table = request.config.stash[_ACCEPTANCE]

    def report(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        table[number] = line
        print(line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter, config):
    table = config.stash.get(_ACCEPTANCE, {})
    if table:
        terminalreporter.write_sep("=", "acceptance criteria")
        for k in sorted(table):
            terminalreporter.write_line(table[k])


@pytest.fixture(scope="session")
def chains():
    return load_chains()
