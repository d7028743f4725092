import sys

import numpy as np
import pytest

from odflow.core import make_network
from odflow.ingestion import SlotCube
from odflow.synth import SynthConfig, generate


@pytest.fixture(scope="session")
def small_synth():
    """Five stations, eight days: quick to generate, still has every slot kind."""
    cfg = SynthConfig(seed=11, n_stations=5, days=8, daily_entries=800.0)
    return generate(cfg)


@pytest.fixture(scope="session")
def small_cube(small_synth):
    return SlotCube(small_synth.trips, small_synth.spec, max_gap=8)


@pytest.fixture(scope="session")
def tiny_data():
    """Ten days over five stations: enough for a 7/1/2 day split."""
    from odflow.harness import prepare_data

    res = generate(SynthConfig(seed=11, n_stations=5, days=10, daily_entries=1500.0))
    return prepare_data(res.trips, res.spec)


@pytest.fixture(scope="session")
def tiny_estimator(tiny_data):
    from odflow.harness import desk_experiment, fit_estimator
    from odflow.training import TrainSchedule

    exp = desk_experiment(
        estimator_gcn_units=8, estimator_lstm_units=8, estimator_schedule=TrainSchedule(max_epochs=4)
    )
    estimator, _ = fit_estimator(tiny_data, exp)
    return estimator


@pytest.fixture
def line_network():
    # three stations on one meridian, ~1.1 km apart
    return make_network([(22.50, 114.0), (22.51, 114.0), (22.52, 114.0)], days=14)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for name, mod in list(sys.modules.items()):
        if name.rsplit(".", 1)[-1] == "test_acceptance":
            lines = getattr(mod, "RESULTS", []) or lines
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
