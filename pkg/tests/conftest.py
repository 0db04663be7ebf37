import numpy as np
import pytest

from cachefran.driver import run_scheme
from cachefran.scenario import ScenarioConfig, make_scenario

# three eRRHs on a line, small arrays: fast enough for full-algorithm tests
SMALL_LAYOUT = ((0.0, 0.0), (0.3, 0.0), (-0.3, 0.0))


def small_config(**changes) -> ScenarioConfig:
    base = dict(num_errh=3, errh_positions=SMALL_LAYOUT, num_ue=2, antennas_errh=2,
                antennas_ue=1, streams=1, library_size=4, subfiles_per_file=2,
                max_outer=8, max_middle=8, max_inner=10)
    base.update(changes)
    return ScenarioConfig(**base)


def random_stack(rng, shape, scale=1.0):
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def default_scenario():
    return make_scenario(ScenarioConfig(), 0)


@pytest.fixture(scope="session")
def default_run(default_scenario):
    """One full joint run on the default scenario, shared by several modules."""
    return run_scheme("alg1-c", default_scenario)


@pytest.fixture(scope="session")
def small_scenario():
    return make_scenario(small_config(), 3)


# one line per acceptance criterion, printed after the test session
ACCEPTANCE_LINES: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES, key=lambda k: int(k[1:])):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
