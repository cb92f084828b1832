import pytest

_ACCEPTANCE = []


@pytest.fixture
def report():
    """Record one acceptance line; the test asserts separately."""

    def add(number: int, passed: bool, text: str):
        _ACCEPTANCE.append((number, passed, text))
        print(f"criterion {number:2d} {'PASS' if passed else 'FAIL'}: {text}")

    return add


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, text in sorted(_ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if passed else 'FAIL'}: {text}")


@pytest.fixture(scope="session")
def cache_dir(tmp_path_factory):
    """Phase-shift and rate tables shared by every test in a session."""
    return tmp_path_factory.mktemp("cache")
