import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one verdict line per acceptance criterion, shown after the run
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def record_criterion():
    def record(number: int, name: str, passed: bool, detail: str = "") -> bool:
        ACCEPTANCE[number] = (name, bool(passed), detail)
        print(f"criterion {number:2d} {'PASS' if passed else 'FAIL'} {name}: {detail}")
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'} {name}: {detail}")
