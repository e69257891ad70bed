"""Synthetic road networks and IDM-driven ground-truth traffic for tests and demos."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .ingest import GREEN, RED, SignalSchedule, TrajectoryDataset, build_dataset, RawTrajectory
from .road_geom import Road, RoadNetwork, polyline_arc_lengths
from .rulebase import IdmParams, MobilParams, RuleConfig, rule_step
from .sim import Agent, SimulationState, admit_pending, log_rows

# (probability, desired-speed factor) per vehicle type
TYPE_MIX = {
    "car": (0.55, 1.0), "taxi": (0.2, 1.05), "bus": (0.05, 0.75),
    "medium": (0.05, 0.85), "heavy": (0.03, 0.7), "motorcycle": (0.12, 1.15),
}


def grid_network(nx: int = 4, ny: int = 4, spacing: float = 120.0, lane_width: float = 3.5,
                 arterial_lanes: int = 2) -> RoadNetwork:
    """Two-way street grid; each direction is its own road offset to the right of the axis.

    Even-indexed rows are arterials with ``arterial_lanes`` lanes per direction.
    Roads entering interior intersections are signalized.
    """
    nodes = {(i, j): np.array([i * spacing, j * spacing]) for i in range(nx) for j in range(ny)}
    interior = {(i, j) for i in range(1, nx - 1) for j in range(1, ny - 1)}
    roads = []
    edges = []
    for (i, j) in nodes:
        for di, dj in ((1, 0), (0, 1)):
            k = (i + di, j + dj)
            if k in nodes:
                edges.append(((i, j), k))
                edges.append((k, (i, j)))
    edges.sort()
    ids = {e: n for n, e in enumerate(edges)}
    for (u, w), rid in ids.items():
        a, b = nodes[u], nodes[w]
        horizontal = u[1] == w[1]
        lanes = arterial_lanes if horizontal and u[1] % 2 == 0 else 1
        d = (b - a) / np.linalg.norm(b - a)
        right = np.array([d[1], -d[0]])
        off = right * lanes * lane_width / 2.0
        succ = [ids[(w, x)] for (v, x) in edges if v == w and x != u]
        roads.append(Road(rid, np.vstack([a + off, b + off]), lanes, lane_width,
                          w in interior, tuple(sorted(succ))))
    return RoadNetwork(roads)


def ring_network(n_roads: int = 8, radius: float = 150.0, lanes: int = 2, lane_width: float = 3.5,
                 points_per_road: int = 6, signalized_every: int = 4) -> RoadNetwork:
    """One-way ring split into ``n_roads`` arcs; every ``signalized_every``-th road ends at a light."""
    roads = []
    for k in range(n_roads):
        th = np.linspace(2 * math.pi * k / n_roads, 2 * math.pi * (k + 1) / n_roads, points_per_road)
        pts = radius * np.column_stack([np.cos(th), np.sin(th)])
        sig = signalized_every > 0 and k % signalized_every == signalized_every - 1
        roads.append(Road(k, pts, lanes, lane_width, sig, ((k + 1) % n_roads,)))
    return RoadNetwork(roads)


def corridor_network(length: float = 300.0, lane_width: float = 3.5) -> RoadNetwork:
    """Two consecutive straight roads; the first ends at a signal."""
    return RoadNetwork([
        Road(0, [[0.0, 0.0], [length, 0.0]], 1, lane_width, True, (1,)),
        Road(1, [[length, 0.0], [2 * length, 0.0]], 1, lane_width, False, ()),
    ])


def fixed_cycle_schedule(net: RoadNetwork, horizon: float, cycle: float = 60.0,
                         green: float = 30.0, offset_by_axis: bool = True,
                         start: float = 0.0) -> SignalSchedule:
    """Fixed-time plan; with ``offset_by_axis`` vertical approaches run half a cycle out of phase."""
    out = {}
    for r in net.roads:
        if not r.signalized:
            continue
        d = r.centerline[-1] - r.centerline[-2]
        shift = cycle / 2.0 if offset_by_axis and abs(d[1]) > abs(d[0]) else 0.0
        ivs = []
        t = start - shift
        while t < start + horizon:
            for dur, st in ((green, GREEN), (cycle - green, RED)):
                a, b = max(t, start), min(t + dur, start + horizon)
                if b > a:
                    if ivs and ivs[-1][2] == st:
                        ivs[-1] = (ivs[-1][0], b, st)
                    else:
                        ivs.append((a, b, st))
                t += dur
        out[str(r.id)] = ivs
    return SignalSchedule(out)


def random_route(net: RoadNetwork, start: int, rng: np.random.Generator,
                 n_roads: int) -> tuple[list, np.ndarray]:
    """Random walk over successors (index ``start`` into net.roads); returns road ids and polyline."""
    seq = [net.roads[start]]
    visited = [seq[0].centerline[0]]
    while len(seq) < n_roads:
        # never return near an already visited point, so the goal is far from the start
        opts = [s for s in seq[-1].successors
                if min(np.linalg.norm(net.road(s).centerline[-1] - v) for v in visited) > 20.0]
        if not opts:
            break
        visited.append(seq[-1].centerline[-1])
        seq.append(net.road(opts[rng.integers(len(opts))]))
    pts = [seq[0].centerline]
    for r in seq[1:]:
        c = r.centerline
        if np.linalg.norm(c[0] - pts[-1][-1]) < 1e-9:
            c = c[1:]
        pts.append(c)
    return [r.id for r in seq], np.vstack(pts)


def entry_roads(net: RoadNetwork) -> list[int]:
    """Roads no other road leads into, or (if none) all roads."""
    fed = {s for r in net.roads for s in r.successors}
    starts = [k for k, r in enumerate(net.roads) if r.id not in fed]
    if starts:
        return starts
    # grid: roads leaving boundary nodes toward the interior
    pts = np.vstack([r.centerline for r in net.roads])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    tol = 10.0
    out = []
    for k, r in enumerate(net.roads):
        p = r.centerline[0]
        on_edge = np.any(np.abs(p - lo) < tol) or np.any(np.abs(p - hi) < tol)
        inward = np.linalg.norm(r.centerline[-1] - (lo + hi) / 2) < np.linalg.norm(p - (lo + hi) / 2)
        if on_edge and inward:
            out.append(k)
    return out or list(range(len(net.roads)))


@dataclass
class TrafficConfig:
    duration: float = 600.0
    dt: float = 0.4
    arrival_rate: float = 0.47
    route_roads: tuple = (3, 6)
    entry_clearance: float = 12.0
    base_idm: IdmParams = None
    v0_jitter: float = 0.1
    route_spacing: float = 5.0

    def __post_init__(self):
        if self.base_idm is None:
            self.base_idm = IdmParams(v0=12.0, T_hw=1.2, s0=2.0, a_max=1.5, b_comf=2.0, delta=4.0)


def generate_traffic(net: RoadNetwork, schedule: SignalSchedule | None, rng: np.random.Generator,
                     cfg: TrafficConfig | None = None, label: str = "1",
                     entries: list[int] | None = None, mobil: MobilParams | None = None,
                     rule: RuleConfig | None = None) -> TrajectoryDataset:
    """Run the IDM world with Poisson arrivals and record it as a dataset."""
    cfg = cfg or TrafficConfig()
    entries = entries if entries is not None else entry_roads(net)
    types = list(TYPE_MIX)
    probs = np.array([TYPE_MIX[t][0] for t in types])
    probs /= probs.sum()
    state = SimulationState(0, cfg.dt, [], [], schedule)
    n_steps = int(round(cfg.duration / cfg.dt))
    rows = []
    waiting: deque = deque()
    next_id = 0
    for step_i in range(n_steps + 1):
        for _ in range(rng.poisson(cfg.arrival_rate * cfg.dt)):
            k = entries[rng.integers(len(entries))]
            n_roads = int(rng.integers(cfg.route_roads[0], cfg.route_roads[1] + 1))
            _, route = random_route(net, k, rng, n_roads)
            vt = types[rng.choice(len(types), p=probs)]
            b = cfg.base_idm
            v0 = b.v0 * TYPE_MIX[vt][1] * (1 + cfg.v0_jitter * rng.uniform(-1, 1))
            waiting.append((str(next_id), vt, route, IdmParams(v0, b.T_hw, b.s0, b.a_max, b.b_comf, b.delta)))
            next_id += 1
        still = deque()
        while waiting:
            aid, vt, route, p = waiting.popleft()
            start = route[0]
            clear = all(np.linalg.norm(ag.position - start) > cfg.entry_clearance for ag in state.live)
            if clear:
                tan = route[1] - route[0]
                v_init = 0.6 * p.v0
                ag = Agent(aid, vt, start.copy(), v_init * tan / np.linalg.norm(tan), route, 0.0,
                           state.step, deque(maxlen=state.history_len), 0, p)
                state.live.append(ag)
            else:
                still.append((aid, vt, route, p))
        waiting = still
        admit_pending(state)
        rows.extend(log_rows(state))
        if step_i < n_steps:
            rule_step(state, cfg.base_idm, mobil or MobilParams(), net, schedule, rule)
    return dataset_from_rows(rows, cfg.dt, cfg.route_spacing, label)


def dataset_from_rows(rows, dt: float, route_spacing: float = 5.0, label: str = "",
                      min_duration: float = 5.0) -> TrajectoryDataset:
    per = {}
    for aid, vt, t, x, y, v in rows:
        per.setdefault(aid, (vt, []))[1].append((t, x, y, v))
    raws = [RawTrajectory(aid, vt, np.array(s), local=True) for aid, (vt, s) in per.items()]
    return build_dataset(raws, dt, route_spacing, min_duration, label)


def route_length(route: np.ndarray) -> float:
    return float(polyline_arc_lengths(route)[-1])
