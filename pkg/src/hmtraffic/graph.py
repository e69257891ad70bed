"""Per-timestep traffic graphs with agent-centric features.

Each agent is a node described in its own goal-oriented frame (origin at its
position, optionally jittered during training; x-axis toward its goal).
Directed edges connect each agent to its nearest neighbours; the edge feature
is the neighbour's origin expressed in the receiving agent's frame.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from .ingest import GREEN, RED, UNKNOWN, VEHICLE_TYPES, SignalSchedule
from .road_geom import RoadNetwork, polyline_arc_lengths, polyline_point_at, project_onto_polyline

HISTORY_MODES = ("none", "all", "context_only")
LIGHT_STATES = (GREEN, RED, UNKNOWN)


@dataclass
class GraphConfig:
    k_nn: int = 8
    neighbor_radius: float = 30.0
    sigma_p: float = 0.5
    k_route: int = 10
    route_spacing: float = 5.0
    horizon: int = 10
    history_mode: str = "none"
    history_len: int = 10
    include_speed: bool = False
    min_goal_distance: float = 0.1

    def __post_init__(self):
        if self.history_mode not in HISTORY_MODES:
            raise ValueError(f"history_mode must be one of {HISTORY_MODES}")

    @property
    def node_dim(self) -> int:
        n = len(VEHICLE_TYPES) + 2 + 3 * self.k_route + len(LIGHT_STATES)
        if self.include_speed:
            n += 1
        if self.history_mode == "all":
            n += 3 * self.history_len
        return n

    @property
    def edge_dim(self) -> int:
        # context-only history rides on the edges so a node never sees its own past
        return 2 + (3 * self.history_len if self.history_mode == "context_only" else 0)


@dataclass(frozen=True)
class Frame:
    origin: np.ndarray
    heading: np.ndarray

    def to_frame(self, p):
        return to_frame(self, p)

    def from_frame(self, p):
        return from_frame(self, p)


def _unit(v):
    return v / np.linalg.norm(v)


def make_frame(pos, goal, sigma_p: float = 0.0, rng: np.random.Generator | None = None,
               perturb: bool = False, tangent=None, min_goal_distance: float = 0.1) -> Frame:
    pos = np.asarray(pos, dtype=float)
    origin = pos + rng.normal(0.0, sigma_p, 2) if perturb else pos.copy()
    d = np.asarray(goal, dtype=float) - origin
    if np.linalg.norm(d) >= min_goal_distance:
        heading = _unit(d)
    elif tangent is not None and np.linalg.norm(tangent) > 0:
        heading = _unit(np.asarray(tangent, dtype=float))
    else:
        heading = np.array([1.0, 0.0])
    return Frame(origin, heading)


def to_frame(frame: Frame, p):
    """World point(s) (..., 2) into the frame."""
    d = np.asarray(p, dtype=float) - frame.origin
    h = frame.heading
    return np.stack([d[..., 0] * h[0] + d[..., 1] * h[1],
                     -d[..., 0] * h[1] + d[..., 1] * h[0]], axis=-1)


def from_frame(frame: Frame, p):
    p = np.asarray(p, dtype=float)
    h = frame.heading
    return frame.origin + np.stack([p[..., 0] * h[0] - p[..., 1] * h[1],
                                    p[..., 0] * h[1] + p[..., 1] * h[0]], axis=-1)


def batch_to_frame(origins, headings, p):
    """Row-wise to_frame; ``p`` is (N, ..., 2) and frames are (N, 2)."""
    p = np.asarray(p, dtype=float)
    extra = (slice(None),) + (None,) * (p.ndim - 2)
    o, h = origins[extra], headings[extra]
    d = p - o
    return np.stack([d[..., 0] * h[..., 0] + d[..., 1] * h[..., 1],
                     -d[..., 0] * h[..., 1] + d[..., 1] * h[..., 0]], axis=-1)


def batch_from_frame(origins, headings, p):
    p = np.asarray(p, dtype=float)
    extra = (slice(None),) + (None,) * (p.ndim - 2)
    o, h = origins[extra], headings[extra]
    return o + np.stack([p[..., 0] * h[..., 0] - p[..., 1] * h[..., 1],
                         p[..., 0] * h[..., 1] + p[..., 1] * h[..., 0]], axis=-1)


@dataclass
class World:
    """Everything a snapshot needs about one instant.

    ``routes`` are per-agent polylines; ``progress`` their current arc
    position (computed by projection when omitted). ``history`` holds the
    ``history_len`` previous positions, oldest first, with ``history_mask``
    flagging the valid ones. ``future``/``future_mask`` carry ground truth
    for training.
    """

    time: float
    agent_ids: Sequence[str]
    types: Sequence[str]
    positions: np.ndarray
    routes: Sequence[np.ndarray]
    progress: np.ndarray | None = None
    speeds: np.ndarray | None = None
    history: np.ndarray | None = None
    history_mask: np.ndarray | None = None
    future: np.ndarray | None = None
    future_mask: np.ndarray | None = None
    schedule: SignalSchedule | None = None
    # optional precomputed routing_features / light_states
    route_features: np.ndarray | None = None
    lights: Sequence[str] | None = None

    def __len__(self):
        return len(self.agent_ids)


@dataclass
class GraphSnapshot:
    x: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    edge_attr: np.ndarray
    origins: np.ndarray
    headings: np.ndarray
    agent_ids: list = field(default_factory=list)
    targets: np.ndarray | None = None
    target_mask: np.ndarray | None = None
    time: float = 0.0

    @property
    def n_nodes(self) -> int:
        return len(self.x)

    def frame(self, i: int) -> Frame:
        return Frame(self.origins[i], self.headings[i])

    def to_json(self) -> str:
        d = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}
        return json.dumps(d)

    @classmethod
    def from_json(cls, text: str) -> "GraphSnapshot":
        d = json.loads(text)
        arr = {k: (np.asarray(v) if isinstance(v, list) and k != "agent_ids" else v)
               for k, v in d.items()}
        for k in ("src", "dst"):
            arr[k] = arr[k].astype(int)
        if arr.get("target_mask") is not None:
            arr["target_mask"] = arr["target_mask"].astype(bool)
        return cls(**arr)


def route_progress(pos, route: np.ndarray) -> float:
    return project_onto_polyline(pos, route)[1]


def routing_points(route: np.ndarray, progress: float, k_route: int, spacing: float) -> np.ndarray:
    """k_route points along the route from ``progress`` onward, clamped at the route end."""
    arcs = progress + spacing * np.arange(k_route)
    return polyline_point_at(route, arcs)


def routing_features(world: World, net: RoadNetwork, cfg: GraphConfig,
                     progress: np.ndarray | None = None) -> np.ndarray:
    """(N, k_route, 3) world-frame routing points with the total width of the nearest road."""
    n = len(world)
    if progress is None:
        progress = world.progress if world.progress is not None else np.array(
            [route_progress(p, r) for p, r in zip(world.positions, world.routes)])
    pts = np.stack([routing_points(r, s, cfg.k_route, cfg.route_spacing)
                    for r, s in zip(world.routes, progress)]) if n else np.zeros((0, cfg.k_route, 2))
    ridx, _, _, _ = net.project_many(pts.reshape(-1, 2))
    widths = (2.0 * net.road_half_width[ridx]).reshape(n, cfg.k_route, 1)
    return np.concatenate([pts, widths], axis=2)


def light_states(world: World, net: RoadNetwork) -> list[str]:
    ridx, _, _, _ = net.project_many(world.positions)
    out = []
    for k in ridx:
        road = net.roads[k]
        if not road.signalized:
            out.append(GREEN)
        elif world.schedule is None:
            out.append(UNKNOWN)
        else:
            out.append(world.schedule.lookup(road.id, world.time))
    return out


def _route_tangent(route: np.ndarray, s: float) -> np.ndarray:
    cum = polyline_arc_lengths(route)
    k = int(np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(route) - 2))
    return route[k + 1] - route[k]


def neighbor_lists(positions: np.ndarray, k_nn: int, radius: float) -> list[np.ndarray]:
    """For each agent, up to k_nn other agents within radius, nearest first, ties by index."""
    n = len(positions)
    out = []
    chunk = 512
    for s in range(0, n, chunk):
        d = np.linalg.norm(positions[s:s + chunk, None, :] - positions[None, :, :], axis=2)
        for r, row in enumerate(d):
            i = s + r
            cand = np.flatnonzero(row <= radius)
            cand = cand[cand != i]
            order = np.lexsort((cand, row[cand]))
            out.append(cand[order[:k_nn]])
    return out


def build_snapshot(world: World, net: RoadNetwork, cfg: GraphConfig,
                   rng: np.random.Generator | None = None, training: bool = False,
                   perturb: bool | None = None) -> GraphSnapshot:
    """Build the graph for one instant.

    ``perturb`` defaults to ``training``; origin jitter needs ``rng``.
    """
    n = len(world)
    if n == 0:
        raise ValueError("snapshot needs at least one agent")
    perturb = training if perturb is None else perturb
    if perturb and rng is None:
        raise ValueError("perturbation requires an rng")
    pos = np.asarray(world.positions, dtype=float)
    progress = world.progress
    if progress is None:
        progress = np.array([route_progress(p, r) for p, r in zip(pos, world.routes)])
    goals = np.stack([r[-1] for r in world.routes])

    origins = pos + rng.normal(0.0, cfg.sigma_p, (n, 2)) if perturb else pos.copy()
    d = goals - origins
    dist = np.linalg.norm(d, axis=1)
    headings = np.zeros((n, 2))
    far = dist >= cfg.min_goal_distance
    headings[far] = d[far] / dist[far, None]
    for i in np.flatnonzero(~far):
        tan = _route_tangent(world.routes[i], progress[i])
        nrm = np.linalg.norm(tan)
        headings[i] = tan / nrm if nrm > 0 else (1.0, 0.0)

    type_oh = np.zeros((n, len(VEHICLE_TYPES)))
    type_oh[np.arange(n), [VEHICLE_TYPES.index(t) for t in world.types]] = 1.0
    goal_local = batch_to_frame(origins, headings, goals)
    route = (world.route_features if world.route_features is not None
             else routing_features(world, net, cfg, progress))
    route_local = np.concatenate([batch_to_frame(origins, headings, route[..., :2]),
                                  route[..., 2:]], axis=2).reshape(n, -1)
    light_oh = np.zeros((n, len(LIGHT_STATES)))
    lights = world.lights if world.lights is not None else light_states(world, net)
    light_oh[np.arange(n), [LIGHT_STATES.index(s) for s in lights]] = 1.0
    blocks = [type_oh, goal_local, route_local, light_oh]
    if cfg.include_speed:
        if world.speeds is None:
            raise ValueError("include_speed needs world speeds")
        blocks.append(np.asarray(world.speeds, dtype=float)[:, None])
    hist = None
    if cfg.history_mode != "none":
        hist = _history_block(world, origins, headings, cfg)
    if cfg.history_mode == "all":
        blocks.append(hist.reshape(n, -1))
    x = np.concatenate(blocks, axis=1)

    src, dst = [], []
    for i, nbrs in enumerate(neighbor_lists(pos, cfg.k_nn, cfg.neighbor_radius)):
        src.append(i)
        dst.append(i)
        src.extend(nbrs.tolist())
        dst.extend([i] * len(nbrs))
    src = np.asarray(src, dtype=int)
    dst = np.asarray(dst, dtype=int)
    rel = batch_to_frame(origins[dst], headings[dst], origins[src])
    rel[src == dst] = 0.0
    if cfg.history_mode == "context_only":
        # neighbour history in the receiver's frame; self-loops carry none
        hist_world = _history_world(world, cfg)
        h = batch_to_frame(origins[dst], headings[dst], hist_world[0][src])
        valid = hist_world[1][src] & (src != dst)[:, None]
        h = np.where(valid[..., None], h, 0.0)
        edge_attr = np.concatenate([rel, np.concatenate([h, valid[..., None]], axis=2)
                                    .reshape(len(src), -1)], axis=1)
    else:
        edge_attr = rel

    targets = mask = None
    if world.future is not None:
        mask = (np.ones(world.future.shape[:2], dtype=bool) if world.future_mask is None
                else np.asarray(world.future_mask, dtype=bool))
        fut = np.where(mask[..., None], world.future, 0.0)
        targets = np.where(mask[..., None], batch_to_frame(origins, headings, fut), 0.0)
    return GraphSnapshot(x, src, dst, edge_attr, origins, headings, list(world.agent_ids),
                         targets, mask, world.time)


def _history_world(world: World, cfg: GraphConfig):
    n = len(world)
    H = cfg.history_len
    if world.history is None:
        return np.zeros((n, H, 2)), np.zeros((n, H), dtype=bool)
    mask = (np.ones((n, H), dtype=bool) if world.history_mask is None
            else np.asarray(world.history_mask, dtype=bool))
    return np.where(mask[..., None], world.history, 0.0), mask


def _history_block(world, origins, headings, cfg) -> np.ndarray:
    hist, mask = _history_world(world, cfg)
    local = np.where(mask[..., None], batch_to_frame(origins, headings, hist), 0.0)
    return np.concatenate([local, mask[..., None].astype(float)], axis=2)


def merge_snapshots(snaps: Sequence[GraphSnapshot]) -> tuple[GraphSnapshot, np.ndarray]:
    """Disjoint union of snapshots; also returns the per-node snapshot index."""
    offs = np.cumsum([0] + [s.n_nodes for s in snaps])
    cat = np.concatenate
    has_t = all(s.targets is not None for s in snaps)
    merged = GraphSnapshot(
        cat([s.x for s in snaps]),
        cat([s.src + o for s, o in zip(snaps, offs)]),
        cat([s.dst + o for s, o in zip(snaps, offs)]),
        cat([s.edge_attr for s in snaps]),
        cat([s.origins for s in snaps]),
        cat([s.headings for s in snaps]),
        sum((list(s.agent_ids) for s in snaps), []),
        cat([s.targets for s in snaps]) if has_t else None,
        cat([s.target_mask for s in snaps]) if has_t else None,
        snaps[0].time if snaps else 0.0,
    )
    owner = np.repeat(np.arange(len(snaps)), [s.n_nodes for s in snaps])
    return merged, owner
