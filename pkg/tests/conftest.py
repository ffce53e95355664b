import functools

import numpy as np
import pytest

from dpmixcox.data import make_dataset
from dpmixcox.simulation import generate_dataset, scenario

# criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key}: {'PASS' if ok else 'FAIL'}  {detail}")


@functools.lru_cache(maxsize=None)
def scenario_table(k, censor_frac, estimators, n_reps=200):
    """Shared desk-scale runs; several tests read the same replicates."""
    from dpmixcox.simulation import run_scenario
    return run_scenario(scenario(k, censor_frac=censor_frac, n_reps=n_reps), list(estimators))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_data():
    return make_dataset(u=[1.0, 2.5, 0.7, 3.2, 1.9], delta=[1, 0, 1, 1, 0], w=[3, 0, 7, 2, 5],
                        z=[[0.1], [-1.2], [0.5], [2.0], [0.0]], a=[1.0, 2.0, 1.0, 0.5, 1.5])


@pytest.fixture(scope="session")
def scenario2_data():
    sc = scenario(2, censor_frac=0.2)
    return generate_dataset(sc, np.random.default_rng(2024), censor_rate=0.5)
