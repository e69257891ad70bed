"""Rule-based baseline: IDM car following with MOBIL lane choice, and IDM calibration.

Agents move along their route polylines by arc length. Lanes are virtual:
on roads with two or more lanes an agent carries a lane index that only
decides who its leader and follower are; positions stay on the route.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .ingest import RED, SignalSchedule, TrajectoryDataset
from .road_geom import RoadNetwork, polyline_point_at
from .sim import SimulationState, admit_pending, reached_goal


@dataclass
class IdmParams:
    v0: float = 15.0
    T_hw: float = 1.5
    s0: float = 2.0
    a_max: float = 1.5
    b_comf: float = 2.0
    delta: float = 4.0

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ValueError(f"IDM parameter {f.name} must be positive")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in fields(self)])

    @classmethod
    def from_array(cls, arr) -> "IdmParams":
        return cls(*[float(x) for x in arr])


@dataclass
class MobilParams:
    politeness: float = 0.3
    threshold: float = 0.2
    b_safe: float = 4.0

    def __post_init__(self):
        if not 0.0 <= self.politeness <= 1.0:
            raise ValueError("politeness must lie in [0, 1]")
        if not self.b_safe > 0:
            raise ValueError("b_safe must be positive")


@dataclass
class RuleConfig:
    veh_length: float = 4.5
    # red lights closer than this act as a standing leader at the stop line
    signal_zone: float = 60.0
    b_emergency: float = 9.0
    despawn_radius: float = 5.0
    lane_change_margin: float = 15.0


def idm_acceleration(v, dv, s, params: IdmParams, b_emergency: float = 9.0):
    """IDM acceleration; ``s=inf`` (or None) means free road.

    ``dv`` is the approach rate v - v_leader. Gaps s <= 0 give -b_emergency.
    """
    if s is None:
        s = math.inf
    v = np.asarray(v, dtype=float)
    dv = np.asarray(dv, dtype=float)
    s = np.asarray(s, dtype=float)
    p = params
    free = 1.0 - (np.maximum(v, 0.0) / p.v0) ** p.delta
    s_star = p.s0 + np.maximum(0.0, v * p.T_hw + v * dv / (2.0 * math.sqrt(p.a_max * p.b_comf)))
    with np.errstate(divide="ignore", invalid="ignore"):
        inter = np.where(np.isinf(s), 0.0, (s_star / np.where(s > 0, s, 1.0)) ** 2)
    a = p.a_max * (free - inter)
    a = np.where(s <= 0, -b_emergency, np.maximum(a, -b_emergency))
    return float(a) if a.ndim == 0 else a


def idm_gradient(params: IdmParams, v, dv, s):
    """Accelerations (n,) and their derivatives wrt (v0, T_hw, s0, a_max, b_comf, delta), (n, 6).

    No emergency clamp; only for gaps s > 0.
    """
    v0, T, s0, A, b, d = params.as_array()
    v, dv, s = (np.asarray(x, dtype=float) for x in (v, dv, s))
    r = np.maximum(v, 0.0) / v0
    rd = r ** d
    sq = math.sqrt(A * b)
    inner = v * T + v * dv / (2.0 * sq)
    on = inner > 0
    s_star = s0 + np.where(on, inner, 0.0)
    finite = np.isfinite(s)
    ss = np.where(finite, s, 1.0)
    z = np.where(finite, s_star / ss, 0.0)
    a = A * (1.0 - rd - z * z)
    # d(-A z^2)/d s_star
    dz = np.where(finite, -2.0 * A * z / ss, 0.0)
    g = np.empty((len(a), 6))
    g[:, 0] = A * d * rd / v0
    g[:, 1] = dz * on * v
    g[:, 2] = dz
    g[:, 3] = (1.0 - rd - z * z) + dz * on * (v * dv / (2.0 * math.sqrt(b))) * (-0.5) * A ** -1.5
    g[:, 4] = dz * on * (v * dv / (2.0 * math.sqrt(A))) * (-0.5) * b ** -1.5
    with np.errstate(divide="ignore", invalid="ignore"):
        g[:, 5] = np.where(r > 0, -A * rd * np.log(np.where(r > 0, r, 1.0)), 0.0)
    return a, g


# MOBIL

@dataclass
class LaneOption:
    """Accelerations evaluated for a prospective change into ``target``."""

    target: int
    ego_acc: float
    new_follower_before: float = 0.0
    new_follower_after: float = 0.0
    old_follower_before: float = 0.0
    old_follower_after: float = 0.0


def mobil_decision(ego_acc: float, candidates, params: MobilParams):
    """Return "keep" or ("change", target) for the best admissible option."""
    best, best_gain = None, params.threshold
    for c in candidates:
        if c.new_follower_after < -params.b_safe:
            continue
        gain = (c.ego_acc - ego_acc) + params.politeness * (
            (c.new_follower_after - c.new_follower_before)
            + (c.old_follower_after - c.old_follower_before))
        if gain > best_gain:
            best, best_gain = c, gain
    return "keep" if best is None else ("change", best.target)


# calibration

@dataclass
class CalibrationConfig:
    lr: float = 0.02
    iterations: int = 3000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    fit_delta: bool = True
    # after a rejected step the rate is halved, then regrows by this factor per accepted step
    lr_growth: float = 1.1
    log_every: int = 50


def idm_mse(params: IdmParams, tuples: np.ndarray) -> float:
    a = idm_acceleration(tuples[:, 0], tuples[:, 1], tuples[:, 2], params)
    return float(np.mean((a - tuples[:, 3]) ** 2))


def calibrate_idm(tuples: np.ndarray, init: IdmParams | None = None,
                  cfg: CalibrationConfig | None = None, b_emergency: float = 9.0):
    """Fit IDM parameters to (v, dv, s, a_real) tuples by Adam on the MSE.

    Parameters are optimized in log space. A step that would raise the loss
    is rejected and the learning rate halved, so the logged loss never
    increases. Returns (params, loss_log) with loss_log a list of
    (iteration, mse).
    """
    init = init or IdmParams()
    cfg = cfg or CalibrationConfig()
    tuples = np.asarray(tuples, dtype=float)
    tuples = tuples[tuples[:, 2] > 0]
    if len(tuples) == 0:
        raise ValueError("no leader-follower tuples with positive gap")
    theta = np.log(init.as_array())
    active = np.ones(6, dtype=bool)
    active[5] = cfg.fit_delta
    m = np.zeros(6)
    v = np.zeros(6)
    lr = cfg.lr

    def loss_grad(th):
        p = IdmParams.from_array(np.exp(th))
        a, g = idm_gradient(p, tuples[:, 0], tuples[:, 1], tuples[:, 2])
        clamped = a < -b_emergency
        a = np.where(clamped, -b_emergency, a)
        g[clamped] = 0.0
        res = a - tuples[:, 3]
        loss = float(np.mean(res * res))
        grad = 2.0 * (res[:, None] * g).mean(axis=0) * np.exp(th)
        return loss, np.where(active, grad, 0.0)

    loss, grad = loss_grad(theta)
    history = [(0, loss)]
    for it in range(1, cfg.iterations + 1):
        m = cfg.beta1 * m + (1 - cfg.beta1) * grad
        v = cfg.beta2 * v + (1 - cfg.beta2) * grad * grad
        mh = m / (1 - cfg.beta1 ** it)
        vh = v / (1 - cfg.beta2 ** it)
        cand = theta - lr * mh / (np.sqrt(vh) + cfg.eps)
        c_loss, c_grad = loss_grad(cand)
        if np.isfinite(c_loss) and c_loss <= loss:
            theta, loss, grad = cand, c_loss, c_grad
            lr = min(lr * cfg.lr_growth, cfg.lr)
        else:
            lr *= 0.5
        if it % cfg.log_every == 0 or it == cfg.iterations:
            history.append((it, loss))
    return IdmParams.from_array(np.exp(theta)), history


def extract_following_tuples(dataset: TrajectoryDataset, net: RoadNetwork,
                             veh_length: float = 4.5, max_gap: float = 100.0) -> np.ndarray:
    """(v, dv, s, a_real) for consecutive same-road pairs.

    The acceleration is the central difference of the follower's speed.
    """
    pos, spd, _ = dataset.dense()
    A, S = spd.shape
    valid = ~np.isnan(spd)
    ridx = np.full((A, S), -1)
    arc = np.full((A, S), np.nan)
    r, _, a, _ = net.project_many(pos[valid])
    ridx[valid] = r
    arc[valid] = a
    dt = dataset.dt
    out = []
    for t in range(1, S - 1):
        alive = np.flatnonzero(valid[:, t])
        if len(alive) < 2:
            continue
        order = alive[np.lexsort((arc[alive, t], ridx[alive, t]))]
        for f, l in zip(order[:-1], order[1:]):
            if ridx[f, t] != ridx[l, t]:
                continue
            if not (valid[f, t - 1] and valid[f, t + 1]):
                continue
            gap = arc[l, t] - arc[f, t] - veh_length
            if not 0.0 < gap < max_gap:
                continue
            acc = (spd[f, t + 1] - spd[f, t - 1]) / (2 * dt)
            out.append((spd[f, t], spd[f, t] - spd[l, t], gap, acc))
    return np.array(out).reshape(-1, 4)


def save_params(path, idm: IdmParams, mobil: MobilParams | None = None) -> None:
    data = {"idm": asdict(idm), "mobil": asdict(mobil or MobilParams())}
    Path(path).write_text(json.dumps(data, indent=1, sort_keys=True), encoding="utf-8")


def load_params(path) -> tuple[IdmParams, MobilParams]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return IdmParams(**data["idm"]), MobilParams(**data.get("mobil", {}))


# closed-loop rule simulation

def _tangent(route: np.ndarray, cum: np.ndarray, s: float) -> np.ndarray:
    k = int(np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(route) - 2))
    d = route[k + 1] - route[k]
    return d / np.linalg.norm(d)


def rule_step(state: SimulationState, idm: IdmParams, mobil: MobilParams, net: RoadNetwork,
              schedule: SignalSchedule | None = None, cfg: RuleConfig | None = None) -> SimulationState:
    """Advance every agent by one dt with IDM (+ MOBIL on multi-lane roads), in place.

    Decisions use the pre-step state only.
    """
    cfg = cfg or RuleConfig()
    schedule = schedule if schedule is not None else state.schedule
    admit_pending(state)
    live = state.live
    dt = state.dt
    n = len(live)
    if n:
        pos = np.array([ag.position for ag in live])
        ridx, _, arc, _ = net.project_many(pos)
        speed = np.array([ag.speed for ag in live])
        lanes_of = np.array([net.roads[k].lane_count for k in ridx])
        lane = np.minimum([ag.lane for ag in live], lanes_of - 1)
        lengths = np.array([net.roads[k].length for k in ridx])
        by_road: dict[int, list[int]] = {}
        for i in np.lexsort((arc, ridx)):
            by_road.setdefault(int(ridx[i]), []).append(int(i))

        # road each agent enters next along its own route
        next_road = np.full(n, -1)
        for i, ag in enumerate(live):
            ahead = ag.progress + (lengths[i] - arc[i]) + 1.0
            if ahead < ag.route_length:
                k, _, _, _ = net.project_many(polyline_point_at(ag.route, ahead)[None])
                if k[0] != ridx[i]:
                    next_road[i] = k[0]

        def leader(i, ln):
            """(gap, leader speed) of the nearest agent ahead in lane ``ln``; (inf, 0) if none."""
            for j in by_road[int(ridx[i])]:
                if arc[j] > arc[i] and lane[j] == ln and j != i:
                    return arc[j] - arc[i] - cfg.veh_length, speed[j]
            nr = next_road[i]
            if nr >= 0 and nr in by_road:
                j = by_road[nr][0]
                return (lengths[i] - arc[i]) + arc[j] - cfg.veh_length, speed[j]
            return math.inf, 0.0

        def follower(i, ln):
            best = None
            for j in by_road[int(ridx[i])]:
                if arc[j] < arc[i] and lane[j] == ln and j != i:
                    best = j
            return best

        red_gap = np.full(n, math.inf)
        if schedule is not None:
            for i in range(n):
                road = net.roads[ridx[i]]
                to_line = lengths[i] - arc[i]
                if road.signalized and 0.0 < to_line <= cfg.signal_zone \
                        and schedule.lookup(road.id, state.clock) == RED:
                    red_gap[i] = to_line

        def params_of(i):
            return live[i].idm or idm

        def acc(i, gap, v_lead):
            p = params_of(i)
            a_lead = idm_acceleration(speed[i], speed[i] - v_lead, gap, p, cfg.b_emergency)
            if math.isfinite(red_gap[i]):
                a_lead = min(a_lead, idm_acceleration(speed[i], speed[i], red_gap[i], p, cfg.b_emergency))
            return a_lead

        new_lane = lane.copy()
        for i in range(n):
            if lanes_of[i] < 2 or lengths[i] - arc[i] < cfg.lane_change_margin:
                continue
            g, vl = leader(i, lane[i])
            a_cur = acc(i, g, vl)
            options = []
            for tgt in (lane[i] - 1, lane[i] + 1):
                if not 0 <= tgt < lanes_of[i]:
                    continue
                gt, vt = leader(i, tgt)
                opt = LaneOption(tgt, acc(i, gt, vt))
                nf = follower(i, tgt)
                if nf is not None:
                    pn = params_of(nf)
                    gap_nf_ego = arc[i] - arc[nf] - cfg.veh_length
                    opt.new_follower_after = idm_acceleration(speed[nf], speed[nf] - speed[i], gap_nf_ego, pn)
                    gn, vn = leader(nf, tgt)
                    opt.new_follower_before = idm_acceleration(speed[nf], speed[nf] - vn, gn, pn)
                of = follower(i, lane[i])
                if of is not None:
                    po = params_of(of)
                    gap_of_ego = arc[i] - arc[of] - cfg.veh_length
                    opt.old_follower_before = idm_acceleration(speed[of], speed[of] - speed[i], gap_of_ego, po)
                    opt.old_follower_after = idm_acceleration(speed[of], speed[of] - vl, g + gap_of_ego + cfg.veh_length, po)
                options.append(opt)
            decision = mobil_decision(a_cur, options, mobil)
            if decision != "keep":
                new_lane[i] = decision[1]
        lane = new_lane

        for i, ag in enumerate(live):
            g, vl = leader(i, lane[i])
            a = max(acc(i, g, vl), -speed[i] / dt)
            ag.history.append(ag.position.copy())
            s_new = ag.progress + speed[i] * dt + a * dt * dt
            v_new = speed[i] + a * dt
            ag.progress = min(s_new, ag.route_length)
            ag.position = polyline_point_at(ag.route, ag.progress)
            ag.velocity = v_new * _tangent(ag.route, ag.route_cum, ag.progress)
            ag.lane = int(lane[i])
        keep = []
        for ag in live:
            if ag.route_length - ag.progress <= 1e-9 or reached_goal(ag, cfg.despawn_radius):
                state.removed.append((ag.agent_id, state.step))
            else:
                keep.append(ag)
        state.live = keep
    state.step += 1
    admit_pending(state)
    return state
