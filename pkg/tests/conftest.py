import numpy as np
import pytest

from fleetsense.demand import DemandModel
from fleetsense.env import EnvConfig
from fleetsense.grid import GridMap
from fleetsense.sensing import PoiModel


def make_config(rows=4, cols=4, n_vehicles=10, horizon=200, alpha=1.0, beta=30.0,
                order_rate=1.0, poi_rate=1.0, tag="Divergent", seed=0, **kw):
    g = GridMap(rows, cols)
    return EnvConfig(g, n_vehicles, horizon, alpha, beta, DemandModel.synthetic(g, order_rate),
                     PoiModel.from_tag(g, tag, poi_rate, 2), seed=seed, **kw)


@pytest.fixture
def desk_config():
    return make_config()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
