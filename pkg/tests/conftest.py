import numpy as np
import pytest

from flexhev.dynamics import DemandTrace
from flexhev.powertrain import ModelParams


@pytest.fixture(scope="session")
def params():
    return ModelParams()


def constant_trace(v, n_steps, dt=1.0, params=None):
    params = params or ModelParams()
    return DemandTrace.from_speed(np.full(n_steps + 1, float(v)), dt, params.vehicle)


# acceptance verdicts, filled by test_acceptance.py and echoed after the run
VERDICTS: dict = {}


def record_verdict(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    VERDICTS[name] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS.values():
            terminalreporter.write_line(line)
