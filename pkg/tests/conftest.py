import numpy as np
import pytest

from gscart import kernels


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    """Each kernel backend in turn."""
    return kernels.get_backend(request.param)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE = {}


@pytest.fixture
def acceptance(request):
    """Record one acceptance criterion's outcome for the end-of-run summary."""

    def record(number, passed, detail):
        ACCEPTANCE[number] = (bool(passed), detail)
        print(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
