import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("repo", deadline=None, max_examples=50, derandomize=True)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def criterion(request):
    """Record the verdict of an acceptance criterion for the end-of-run summary.

    Returns ``record(number, title, passed, detail)``; the test should
    still assert on ``passed`` so a failure is reported as usual.
    """
    table = request.config.stash.setdefault(_CRITERIA, {})

    def record(number: int, title: str, passed: bool, detail: str = "") -> None:
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}"
        table[number] = line + (f"  [{detail}]" if detail else "")
        print(table[number])

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    table = config.stash.get(_CRITERIA, {})
    if table:
        terminalreporter.write_sep("=", "acceptance criteria")
        for number in sorted(table):
            terminalreporter.write_line(table[number])
