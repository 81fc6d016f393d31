import numpy as np
import pytest
from hypothesis import settings

from dpmshard.config import CalibrationSpec, RunConfig
from dpmshard.datagen import GeneratorSpec, generate

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_data():
    data, truth = generate(GeneratorSpec(210, 6, 4, seed=3))
    return data, truth


@pytest.fixture
def quick_config():
    return RunConfig(seed=5, iterations=6, superclusters=3, snapshot_period=2,
                     calibration=CalibrationSpec(iterations=10))


_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Callable recording one PASS/FAIL line per exit criterion; printed in the terminal summary."""
    def record(number, passed, detail):
        _ACCEPTANCE_LINES.append((number, f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"))
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE_LINES, key=lambda t: (isinstance(t[0], str), t[0])):
            terminalreporter.write_line(line)
