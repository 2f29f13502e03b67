import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.register_profile("thorough", max_examples=500, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def hsz():
    from mtbohm.experiments import HszGeometry, hsz_experiment

    return hsz_experiment(HszGeometry())


@pytest.fixture(scope="session")
def epr():
    from mtbohm.experiments import epr_experiment

    return epr_experiment()


# --- acceptance reporting -------------------------------------------------------
# Acceptance tests record one pass/fail line per criterion; the lines are
# echoed immediately and repeated in the terminal summary.

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance():
    def record(criterion: str, passed: bool, detail: str) -> bool:
        line = f"ACCEPTANCE {criterion}: {'PASS' if passed else 'FAIL'} - {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line, flush=True)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
