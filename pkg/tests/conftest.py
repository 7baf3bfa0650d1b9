import pytest

ACCEPTANCE_RESULTS = {}
CRITERIA = range(1, 10)


@pytest.fixture
def record_acceptance():
    """Store ``(passed, detail)`` for an acceptance criterion and print its line."""

    def record(number, title, passed, detail):
        ACCEPTANCE_RESULTS[number] = (title, bool(passed), detail)
        print(f"\nACCEPTANCE {number} {'PASS' if passed else 'FAIL'} {title}: {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in CRITERIA:
        title, passed, detail = ACCEPTANCE_RESULTS.get(number, ("criterion", False,
                                                                "no result recorded"))
        terminalreporter.write_line(
            f"ACCEPTANCE {number} {'PASS' if passed else 'FAIL'} {title}: {detail}")
