import pytest

RESULTS_KEY = pytest.StashKey()


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "acceptance(criterion): end-to-end acceptance criterion"
    )
    config.stash[RESULTS_KEY] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker and report.when == "call":
        item.config.stash[RESULTS_KEY].append((marker.args[0], report.passed))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(RESULTS_KEY, [])
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed in sorted(results, key=lambda r: r[0]):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] {criterion}")
