import pytest

_VERDICTS_KEY = pytest.StashKey[dict]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    store = request.config.stash.setdefault(_VERDICTS_KEY, {})

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {detail}"
        store[number] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_VERDICTS_KEY, None)
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(store):
        terminalreporter.write_line(store[number])
    for number in sorted(_RAN - set(store)):
        terminalreporter.write_line(f"FAIL criterion {number:>2}: errored before reaching its check")


_RAN: set = set()


def pytest_runtest_logreport(report):
    if "test_criterion_" in report.nodeid and report.when == "setup":
        _RAN.add(int(report.nodeid.rsplit("test_criterion_", 1)[1].split("_")[0]))
