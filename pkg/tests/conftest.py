import numpy as np
import pytest

from depth_introspect.nn import precision

# criterion number -> list of (status, title, details) for every test carrying the marker
_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or (rep.when == "setup" and not rep.passed)):
        return
    number, title = marker.args
    props = dict(item.user_properties)
    if rep.passed:
        status = props.get("status", "PASS")
    else:
        status = "SKIP" if rep.skipped else "FAIL"
    _CRITERIA.setdefault(number, []).append((status, title, props.get("detail", "")))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        results = _CRITERIA[number]
        statuses = [s for s, _, _ in results]
        if "FAIL" in statuses:
            status = "FAIL"
        elif "SKIP" in statuses:
            status = "SKIP"
        elif "SOFT-FAIL" in statuses:
            status = "SOFT-FAIL"
        else:
            status = "PASS"
        details = " | ".join(d for _, _, d in results if d)
        terminalreporter.write_line(f"criterion {number:>2} {status:<9} {results[0][1]}: {details}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


@pytest.fixture
def detail(record_property):
    """Attach a human-readable measurement to the acceptance line of this test."""
    parts = []

    def add(text: str) -> None:
        parts.append(text)
        record_property("detail", "; ".join(parts))

    return add
