import pytest

_RESULTS: dict[int, tuple[str, str, str]] = {}
_DETAILS: dict[str, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and short title")


@pytest.fixture
def report_detail(request):
    """Lets an acceptance test attach the measured numbers to its summary line."""

    def put(text):
        _DETAILS[request.node.nodeid] = text

    return put


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
        _RESULTS[n] = (status, title, _DETAILS.get(item.nodeid, ""))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_RESULTS):
        status, title, detail = _RESULTS[n]
        tr.write_line(f"[{status}] criterion {n:2d}: {title}" + (f"  ({detail})" if detail else ""))
