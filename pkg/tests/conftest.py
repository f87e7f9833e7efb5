import random

import pytest

from adaptive_gke.algebra import GroupParams, group_preset


@pytest.fixture(scope="session")
def toy_params() -> GroupParams:
    """Smallest workable group: p=23, q=11, g=2."""
    return GroupParams.create(23, 11, 2)


@pytest.fixture(scope="session")
def test64() -> GroupParams:
    return group_preset("test64")


@pytest.fixture
def rng() -> random.Random:
    return random.Random(0xA5A5)


# One pass/fail line per acceptance criterion at the end of the run.
_ACCEPTANCE_RESULTS: dict[str, str] = {}


def record_acceptance(name: str, outcome: str) -> None:
    _ACCEPTANCE_RESULTS[name] = outcome


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when != "call" or "test_acceptance" not in str(item.fspath):
        return
    criterion = getattr(item.function, "_criterion", None)
    if criterion:
        record_acceptance(criterion, "PASS" if report.passed else "FAIL")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for name in sorted(_ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"{_ACCEPTANCE_RESULTS[name]}  {name}")
