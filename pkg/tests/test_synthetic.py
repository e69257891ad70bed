import numpy as np

from hmtraffic.ingest import GREEN, RED
from hmtraffic.synthetic import (TrafficConfig, corridor_network, entry_roads, fixed_cycle_schedule,
                                 generate_traffic, grid_network, random_route, ring_network)


def test_grid_topology():
    net = grid_network()
    # 4x4 nodes: 24 undirected links, two directions each
    assert len(net.roads) == 48
    for r in net.roads:
        for s in r.successors:
            assert np.linalg.norm(net.road(s).centerline[0] - r.centerline[-1]) < 10.0
    assert sum(r.signalized for r in net.roads) == 16
    assert entry_roads(net)


def test_ring_and_corridor():
    ring = ring_network()
    assert [r.successors for r in ring.roads] == [((k + 1) % 8,) for k in range(8)]
    assert sum(r.signalized for r in ring.roads) == 2
    cor = corridor_network()
    assert cor.roads[0].signalized and cor.roads[0].length == 300.0


def test_fixed_cycle_schedule_partitions_time():
    net = grid_network()
    sch = fixed_cycle_schedule(net, 300.0)
    for rid, ivs in sch.intervals.items():
        assert ivs[0][0] == 0.0 and ivs[-1][1] == 300.0
        assert all(a[1] == b[0] and a[2] != b[2] for a, b in zip(ivs, ivs[1:]))
        assert {iv[2] for iv in ivs} == {GREEN, RED}


def test_random_route_is_connected():
    net = grid_network()
    rng = np.random.default_rng(0)
    for start in entry_roads(net)[:5]:
        ids, poly = random_route(net, start, rng, 5)
        for a, b in zip(ids, ids[1:]):
            assert b in net.road(a).successors
        assert np.linalg.norm(poly[-1] - poly[0]) > 20.0


def test_generate_traffic_deterministic_and_busy(grid):
    net, sch = grid
    cfg = TrafficConfig(duration=120.0)
    a = generate_traffic(net, sch, np.random.default_rng([1, 1]), cfg)
    b = generate_traffic(net, sch, np.random.default_rng([1, 1]), cfg)
    assert len(a.agents) == len(b.agents)
    for x, y in zip(a.agents, b.agents):
        assert x.agent_id == y.agent_id and np.array_equal(x.positions, y.positions)
    pos, _, _ = a.dense()
    live = (~np.isnan(pos[..., 0])).sum(axis=0)
    assert live[-50:].mean() > 15
    _, _, _, dist = net.project_many(np.vstack([ag.positions for ag in a.agents]))
    assert np.percentile(dist, 99) < 3.0
