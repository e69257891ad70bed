import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hmtraffic.road_geom import Road, RoadNetwork
from hmtraffic.synthetic import TrafficConfig, fixed_cycle_schedule, generate_traffic, grid_network

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def straight_net():
    return RoadNetwork([Road(0, [[0.0, 0.0], [10.0, 0.0]], 1, 3.5)])


@pytest.fixture
def three_road_net():
    return RoadNetwork([
        Road(0, [[0.0, 0.0], [100.0, 0.0]], 2, 3.5, True, (1, 2)),
        Road(1, [[100.0, 0.0], [150.0, 40.0], [200.0, 40.0]], 1, 3.0, False, ()),
        Road(2, [[100.0, 0.0], [100.0, -80.0]], 1, 3.5, False, ()),
    ])


@pytest.fixture(scope="session")
def grid():
    net = grid_network()
    return net, fixed_cycle_schedule(net, 1000.0)


@pytest.fixture(scope="session")
def short_days(grid):
    """Two brief recordings on the grid for fast training and simulation tests."""
    net, sch = grid
    cfg = TrafficConfig(duration=90.0)
    return [generate_traffic(net, sch, np.random.default_rng([7, d]), cfg, label=f"day{d}")
            for d in (1, 2)]


def random_snapshot(rng, n=5, node_dim=41, edge_dim=2, horizon=10, p_edge=0.6):
    """Small random graph with self-loops, random edges and random targets."""
    from hmtraffic.graph import GraphSnapshot
    src, dst = [], []
    for i in range(n):
        src.append(i)
        dst.append(i)
        for j in range(n):
            if j != i and rng.random() < p_edge:
                src.append(j)
                dst.append(i)
    src, dst = np.array(src), np.array(dst)
    e = rng.normal(size=(len(src), edge_dim)) * 10
    e[src == dst] = 0
    return GraphSnapshot(rng.normal(size=(n, node_dim)), src, dst, e, np.zeros((n, 2)),
                         np.tile([1.0, 0.0], (n, 1)), [str(k) for k in range(n)],
                         rng.normal(size=(n, horizon, 2)) * 5, np.ones((n, horizon), dtype=bool))
