import pytest

ACCEPTANCE_KEY = pytest.StashKey[dict]()
N_CRITERIA = 10


@pytest.fixture
def criterion(request):
    """Record one acceptance verdict; returns ``passed`` for use in assert."""
    results = request.config.stash.setdefault(ACCEPTANCE_KEY, {})

    def record(number, passed, detail):
        results[number] = (bool(passed), detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE_KEY, None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n not in results:
            terminalreporter.write_line(f"criterion {n:>2}: NO VERDICT  (errored before scoring or not selected)")
            continue
        passed, detail = results[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
