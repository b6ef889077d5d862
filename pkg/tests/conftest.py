import pytest

from mmrag.fixtures import build_synthetic_kb


@pytest.fixture(scope="session")
def small_kb():
    """40-entity stub-encoded KB shared by read-only tests."""
    return build_synthetic_kb(40, seed=0)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("tests.test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
