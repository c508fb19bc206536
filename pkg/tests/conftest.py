import pytest

_results = {}


@pytest.fixture
def report(request):
    """Attach a measured-value summary to the acceptance line of this test."""

    def _add(text):
        request.node.user_properties.append(("detail", text))
        print(text)

    return _add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        n = marker.args[0]
        doc = (item.obj.__doc__ or item.name).strip().splitlines()[0]
        details = "; ".join(v for k, v in item.user_properties if k == "detail")
        _results[n] = (rep.passed, doc, details)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    tr = terminalreporter
    tr.write_sep("=", "acceptance criteria")
    for n in sorted(_results):
        ok, doc, details = _results[n]
        line = f"{'PASS' if ok else 'FAIL'} criterion {n:2d}: {doc}"
        if details:
            line += f" [{details}]"
        tr.write_line(line)
