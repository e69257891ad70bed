"""Closed-loop simulation: sample predicted positions, snap to road, LQ-smooth, advance.

Every step each live agent gets T target positions from the policy; the
targets are projected onto the road network and tracked by a finite-horizon
LQ regulator on the double integrator

    p[t+1] = p[t] + dt v[t] + dt^2 a[t]
    v[t+1] = v[t] + dt a[t]

minimizing sum_{t=1..T} |p[t] - target[t]|^2 + eta * sum_{t=0..T-1} |a[t]|^2.
Only the first planned step is applied (receding horizon).
"""
from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Protocol, Sequence

import numpy as np

from .egat import GaussianPrediction, ModelParams, forward
from .graph import Frame, GraphConfig, World, batch_from_frame, build_snapshot
from .ingest import NORMALIZED_COLUMNS, SignalSchedule, TrajectoryDataset
from .road_geom import RoadNetwork, polyline_arc_lengths, polyline_point_at, project_onto_polyline


@dataclass
class SimConfig:
    eta_a: float = 1.0
    despawn_radius: float = 5.0
    sample_mode: str = "sample"
    # window (m) around the previous progress used to track route progress
    progress_back: float = 5.0
    progress_ahead: float = 40.0


# LQ tracking

@dataclass
class LqrProblem:
    p0: np.ndarray
    v0: np.ndarray
    targets: np.ndarray
    dt: float
    eta_a: float

    def __post_init__(self):
        self.p0 = np.asarray(self.p0, dtype=float)
        self.v0 = np.asarray(self.v0, dtype=float)
        self.targets = np.asarray(self.targets, dtype=float).reshape(-1, 2)
        if len(self.targets) < 1:
            raise ValueError("horizon must be >= 1")
        if not self.dt > 0 or not self.eta_a > 0:
            raise ValueError("dt and eta_a must be positive")


@dataclass
class LqrPlan:
    positions: np.ndarray
    velocities: np.ndarray
    accelerations: np.ndarray
    cost: float


@lru_cache(maxsize=64)
def _riccati_gains(horizon: int, dt: float, eta: float):
    """Feedback gains K[t] (T, 2) and the matrices needed for the affine terms."""
    A = np.array([[1.0, dt], [0.0, 1.0]])
    B = np.array([dt * dt, dt])
    Q = np.diag([1.0, 0.0])
    P = Q.copy()
    K = np.zeros((horizon, 2))
    # feed-forward propagation: q_t = -Q xbar_t + F_t^T q_{t+1}
    F = np.zeros((horizon, 2, 2))
    S_inv = np.zeros(horizon)
    for t in range(horizon - 1, -1, -1):
        PB = P @ B
        s = eta + B @ PB
        K[t] = (PB @ A) / s
        S_inv[t] = 1.0 / s
        F[t] = A - np.outer(B, K[t])
        Qt = Q if t >= 1 else np.zeros((2, 2))
        P = Qt + A.T @ P @ A - np.outer(A.T @ PB, PB @ A) / s
    return K, F, S_inv, A, B


def lqr_solve_batch(p0, v0, targets, dt: float, eta_a: float):
    """Vectorized LQ tracking for N agents.

    p0, v0: (N, 2); targets: (N, T, 2). Returns positions (N, T, 2) for steps
    1..T, velocities (N, T, 2), accelerations (N, T, 2) for steps 0..T-1 and
    costs (N,).
    """
    p0 = np.asarray(p0, dtype=float)
    v0 = np.asarray(v0, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if not np.all(np.isfinite(targets)):
        raise ValueError("LQR targets must be finite")
    n, T, _ = targets.shape
    K, F, S_inv, A, B = _riccati_gains(T, float(dt), float(eta_a))
    # affine term per agent and axis: q has shape (N, 2 axes, 2 state)
    q = np.zeros((n, 2, 2))
    q[..., 0] = -targets[:, T - 1, :]
    kff = np.zeros((T, n, 2))
    for t in range(T - 1, -1, -1):
        kff[t] = S_inv[t] * (q @ B)
        q = q @ F[t]
        if t >= 1:
            q[..., 0] -= targets[:, t - 1, :]
    x = np.stack([p0, v0], axis=-1)  # (N, axes, state)
    pos = np.empty((n, T, 2))
    vel = np.empty((n, T, 2))
    acc = np.empty((n, T, 2))
    for t in range(T):
        a = -(x @ K[t]) - kff[t]
        acc[:, t] = a
        x = x @ A.T + a[..., None] * B
        pos[:, t] = x[..., 0]
        vel[:, t] = x[..., 1]
    cost = ((pos - targets) ** 2).sum(axis=(1, 2)) + eta_a * (acc ** 2).sum(axis=(1, 2))
    return pos, vel, acc, cost


def lqr_solve(prob: LqrProblem) -> LqrPlan:
    pos, vel, acc, cost = lqr_solve_batch(prob.p0[None], prob.v0[None], prob.targets[None],
                                          prob.dt, prob.eta_a)
    return LqrPlan(pos[0], vel[0], acc[0], float(cost[0]))


def rollout_controls(p0, v0, acc, dt: float):
    """Positions and velocities (T, 2) produced by applying ``acc`` (T, 2)."""
    p, v = np.array(p0, dtype=float), np.array(v0, dtype=float)
    pos, vel = [], []
    for a in np.asarray(acc, dtype=float):
        p = p + dt * v + dt * dt * a
        v = v + dt * a
        pos.append(p)
        vel.append(v)
    return np.array(pos), np.array(vel)


def plan_cost(positions, accelerations, targets, eta_a: float) -> float:
    return float(((np.asarray(positions) - targets) ** 2).sum() + eta_a * (np.asarray(accelerations) ** 2).sum())


# sampling and projection

def sample_positions(pred: GaussianPrediction, origins, headings=None, rng=None,
                     mode: str = "sample") -> np.ndarray:
    """World-frame positions drawn from each node's Gaussian factors.

    ``origins`` may be a single Frame (then pred holds one node or is (T, ...)),
    or (N, 2) origins with (N, 2) headings.
    """
    if isinstance(origins, Frame):
        frame = origins
        mean = pred.mean.reshape(-1, pred.mean.shape[-2], 2)
        chol = pred.chol.reshape(-1, pred.chol.shape[-2], 3)
        o, h = frame.origin[None], frame.heading[None]
        out = sample_positions(GaussianPrediction(mean, chol), o, h, rng, mode)
        return out[0] if pred.mean.ndim == 2 else out
    local = pred.mean
    if mode == "sample":
        eps = rng.standard_normal(local.shape)
        l11, l21, l22 = pred.chol[..., 0], pred.chol[..., 1], pred.chol[..., 2]
        local = local + np.stack([l11 * eps[..., 0], l21 * eps[..., 0] + l22 * eps[..., 1]], axis=-1)
    elif mode != "mean":
        raise ValueError(f"unknown sample mode {mode!r}")
    return batch_from_frame(np.asarray(origins), np.asarray(headings), local)


def project_targets(points, net: RoadNetwork) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    _, foot, _, _ = net.project_many(pts.reshape(-1, 2))
    return foot.reshape(pts.shape)


# simulation state

@dataclass
class Agent:
    agent_id: str
    vehicle_type: str
    position: np.ndarray
    velocity: np.ndarray
    route: np.ndarray
    progress: float
    entry_step: int
    history: deque = field(default_factory=deque)
    lane: int = 0
    idm: object = None

    def __post_init__(self):
        self.route_cum = polyline_arc_lengths(self.route)

    @property
    def goal(self) -> np.ndarray:
        return self.route[-1]

    @property
    def route_length(self) -> float:
        return float(self.route_cum[-1])

    @property
    def speed(self) -> float:
        return float(np.hypot(*self.velocity))


@dataclass
class SimulationState:
    step: int
    dt: float
    live: list
    pending: list
    schedule: SignalSchedule | None = None
    history_len: int = 10
    removed: list = field(default_factory=list)

    @property
    def clock(self) -> float:
        return self.step * self.dt

    def copy(self) -> "SimulationState":
        import copy
        return copy.deepcopy(self)


def _entry_velocity(positions: np.ndarray, k: int, speed: float, route: np.ndarray, dt: float):
    if k + 1 < len(positions):
        return (positions[k + 1] - positions[k]) / dt
    if k >= 1:
        return (positions[k] - positions[k - 1]) / dt
    tan = route[1] - route[0]
    return speed * tan / np.linalg.norm(tan)


def initial_state(dataset: TrajectoryDataset, start_step: int | None = None,
                  duration: float | None = None, schedule: SignalSchedule | None = None,
                  history_len: int = 10) -> SimulationState:
    """Agents live at ``start_step`` start at their recorded state; later ones wait."""
    s0 = dataset.first_step if start_step is None else int(start_step)
    s_end = None if duration is None else s0 + int(round(duration / dataset.dt))
    live, pending = [], []
    for a in dataset.agents:
        if a.end_step < s0 or (s_end is not None and a.start_step > s_end):
            continue
        k = max(s0 - a.start_step, 0)
        vel = _entry_velocity(a.positions, k, a.speeds[k], a.route, dataset.dt)
        prog = project_onto_polyline(a.positions[k], a.route)[1]
        agent = Agent(a.agent_id, a.vehicle_type, a.positions[k].copy(), vel, a.route,
                      prog, a.start_step, deque(maxlen=history_len))
        if a.start_step <= s0:
            for j in range(max(0, k - history_len), k):
                agent.history.append(a.positions[j].copy())
            live.append(agent)
        else:
            pending.append(agent)
    pending.sort(key=lambda ag: (ag.entry_step, _id_sort_key(ag.agent_id)))
    live.sort(key=lambda ag: _id_sort_key(ag.agent_id))
    return SimulationState(s0, dataset.dt, live, pending, schedule, history_len)


def _id_sort_key(agent_id):
    s = str(agent_id)
    return (0, int(s), "") if s.isdigit() else (1, 0, s)


def admit_pending(state: SimulationState) -> None:
    while state.pending and state.pending[0].entry_step <= state.step:
        ag = state.pending.pop(0)
        ag.history = deque(maxlen=state.history_len)
        state.live.append(ag)
    state.live.sort(key=lambda ag: _id_sort_key(ag.agent_id))


def world_from_state(state: SimulationState) -> World:
    live = state.live
    H = state.history_len
    n = len(live)
    hist = np.zeros((n, H, 2))
    mask = np.zeros((n, H), dtype=bool)
    for i, ag in enumerate(live):
        h = list(ag.history)
        if h:
            hist[i, H - len(h):] = h
            mask[i, H - len(h):] = True
    return World(
        time=state.clock,
        agent_ids=[ag.agent_id for ag in live],
        types=[ag.vehicle_type for ag in live],
        positions=np.array([ag.position for ag in live]).reshape(n, 2),
        routes=[ag.route for ag in live],
        progress=np.array([ag.progress for ag in live]),
        speeds=np.array([ag.speed for ag in live]),
        history=hist, history_mask=mask, schedule=state.schedule)


def update_progress(ag: Agent, cfg: SimConfig) -> None:
    _, s, _ = project_onto_polyline(ag.position, ag.route, ag.progress - cfg.progress_back,
                                    ag.progress + cfg.progress_ahead)
    ag.progress = max(ag.progress, s)


def reached_goal(ag: Agent, radius: float, slack: float = 10.0) -> bool:
    """Within ``radius`` of the final route point, and actually near the route end."""
    return (np.linalg.norm(ag.position - ag.goal) <= radius
            and ag.progress >= ag.route_length - radius - slack)


def despawn(state: SimulationState, radius: float) -> None:
    keep = []
    for ag in state.live:
        if reached_goal(ag, radius):
            state.removed.append((ag.agent_id, state.step))
        else:
            keep.append(ag)
    state.live = keep


# policies

class Policy(Protocol):
    def propose(self, state: SimulationState, net: RoadNetwork, rng: np.random.Generator) -> np.ndarray:
        """Target world positions (N_live, T, 2)."""


@dataclass
class EgatPolicy:
    params: ModelParams
    graph: GraphConfig
    mode: str = "sample"

    def propose(self, state, net, rng):
        world = world_from_state(state)
        snap = build_snapshot(world, net, self.graph, training=False)
        pred = forward(snap, self.params)
        return sample_positions(pred, snap.origins, snap.headings, rng, self.mode)


@dataclass
class ConstantVelocityPolicy:
    horizon: int = 10

    def propose(self, state, net, rng):
        t = (np.arange(1, self.horizon + 1) * state.dt)[None, :, None]
        p = np.array([ag.position for ag in state.live])[:, None, :]
        v = np.array([ag.velocity for ag in state.live])[:, None, :]
        return p + t * v


def step(state: SimulationState, policy, net: RoadNetwork, cfg: SimConfig,
         rng: np.random.Generator, project: bool = True) -> SimulationState:
    """Advance the world by one dt in place and return it."""
    admit_pending(state)
    if state.live:
        targets = policy.propose(state, net, rng)
        if project:
            targets = project_targets(targets, net)
        p0 = np.array([ag.position for ag in state.live])
        v0 = np.array([ag.velocity for ag in state.live])
        pos, vel, _, _ = lqr_solve_batch(p0, v0, targets, state.dt, cfg.eta_a)
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(vel))):
            raise FloatingPointError("non-finite state in simulation step")
        for i, ag in enumerate(state.live):
            ag.history.append(ag.position.copy())
            ag.position = pos[i, 0]
            ag.velocity = vel[i, 0]
            update_progress(ag, cfg)
        despawn(state, cfg.despawn_radius)
    state.step += 1
    admit_pending(state)
    return state


def log_rows(state: SimulationState) -> list[tuple]:
    t = state.clock
    return [(ag.agent_id, ag.vehicle_type, t, float(ag.position[0]), float(ag.position[1]), ag.speed)
            for ag in state.live]


def run(state: SimulationState, step_fn, duration: float) -> list[tuple]:
    """Call ``step_fn(state)`` for duration/dt steps; returns the normalized log rows."""
    admit_pending(state)
    rows = log_rows(state)
    n_steps = int(round(duration / state.dt))
    for _ in range(n_steps):
        step_fn(state)
        rows.extend(log_rows(state))
    return rows


def run_policy(state: SimulationState, policy, net: RoadNetwork, duration: float,
               cfg: SimConfig | None = None, rng: np.random.Generator | None = None,
               project: bool = True) -> list[tuple]:
    cfg = cfg or SimConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    return run(state, lambda s: step(s, policy, net, cfg, rng, project), duration)


def write_log(rows: Sequence[tuple], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(NORMALIZED_COLUMNS)
        for aid, vtype, t, x, y, v in rows:
            w.writerow([aid, vtype, repr(float(t)), repr(float(x)), repr(float(y)), repr(float(v))])


def rows_to_array(rows):
    """(agent_ids, types, numeric (n, 4) of time, x, y, speed)."""
    ids = [r[0] for r in rows]
    types = [r[1] for r in rows]
    num = np.array([r[2:] for r in rows], dtype=float).reshape(-1, 4)
    return ids, types, num


def route_point(ag: Agent, s: float) -> np.ndarray:
    return polyline_point_at(ag.route, s)


def nan_guard(x: float) -> float:
    if not math.isfinite(x):
        raise FloatingPointError("non-finite value")
    return x
