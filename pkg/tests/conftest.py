import pytest

from spatialcvm.calibration import CalibrationCache


@pytest.fixture(scope="session")
def calib_cache(tmp_path_factory):
    """Calibration cache shared by every test in the session."""
    return CalibrationCache(tmp_path_factory.mktemp("calibrations"))


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per checked criterion, then assert it."""

    def check(label, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
