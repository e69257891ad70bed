"""Microscopic and macroscopic similarity between a real and a simulated log.

Logs are flat tables of (agent, time, x, y, speed) samples on a shared dt
grid. Per-step RMSE normalizes by the agents (or roads) present at that
step, then averages over steps.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ingest import NORMALIZED_COLUMNS, TrajectoryDataset, read_normalized
from .road_geom import RoadNetwork

OFFROAD_THRESHOLD = 1.5
REPORT_COLUMNS = ("road_id", "mean_density_real", "mean_density_sim",
                  "mean_speed_real", "mean_speed_sim")


@dataclass
class TrajectoryLog:
    agent_ids: np.ndarray
    steps: np.ndarray
    positions: np.ndarray
    speeds: np.ndarray
    dt: float
    types: np.ndarray | None = None

    def __post_init__(self):
        self.agent_ids = np.asarray(self.agent_ids, dtype=str)
        self.steps = np.asarray(self.steps, dtype=np.int64)
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        self.speeds = np.asarray(self.speeds, dtype=float)
        n = len(self.agent_ids)
        if not (len(self.steps) == len(self.positions) == len(self.speeds) == n):
            raise ValueError("log columns must have equal length")
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    def __len__(self):
        return len(self.agent_ids)

    @classmethod
    def from_rows(cls, rows, dt: float) -> "TrajectoryLog":
        """Rows of (agent_id, type, time, x, y, speed), as the simulator logs them."""
        rows = list(rows)
        if not rows:
            return cls(np.zeros(0, str), np.zeros(0, int), np.zeros((0, 2)), np.zeros(0), dt)
        ids = [str(r[0]) for r in rows]
        num = np.array([r[2:6] for r in rows], dtype=float)
        return cls(ids, np.rint(num[:, 0] / dt), num[:, 1:3], num[:, 3], dt,
                   np.asarray([r[1] for r in rows], dtype=str))

    @classmethod
    def from_dataset(cls, ds: TrajectoryDataset) -> "TrajectoryLog":
        ids, steps, pos, spd, types = [], [], [], [], []
        for a in ds.agents:
            ids.extend([a.agent_id] * a.n_steps)
            types.extend([a.vehicle_type] * a.n_steps)
            steps.append(np.arange(a.start_step, a.end_step + 1))
            pos.append(a.positions)
            spd.append(a.speeds)
        return cls(ids, np.concatenate(steps), np.vstack(pos), np.concatenate(spd), ds.dt,
                   np.asarray(types, dtype=str))

    @classmethod
    def from_csv(cls, path, dt: float) -> "TrajectoryLog":
        rows = []
        for raw in read_normalized(path):
            for t, x, y, v in raw.samples:
                rows.append((raw.agent_id, raw.vehicle_type, t, x, y, v))
        return cls.from_rows(rows, dt)

    def window(self, first: int, last: int) -> "TrajectoryLog":
        keep = (self.steps >= first) & (self.steps <= last)
        return TrajectoryLog(self.agent_ids[keep], self.steps[keep], self.positions[keep],
                             self.speeds[keep], self.dt,
                             None if self.types is None else self.types[keep])

    def to_csv(self, path) -> None:
        types = self.types if self.types is not None else np.full(len(self), "car")
        order = np.lexsort((self.agent_ids, self.steps))
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(NORMALIZED_COLUMNS)
            for i in order:
                w.writerow([self.agent_ids[i], types[i], repr(float(self.steps[i] * self.dt)),
                            repr(float(self.positions[i, 0])), repr(float(self.positions[i, 1])),
                            repr(float(self.speeds[i]))])


@dataclass
class AlignedLogs:
    """Samples where an agent is live in both logs at the same step."""

    steps: np.ndarray
    agent_ids: np.ndarray
    real_pos: np.ndarray
    sim_pos: np.ndarray
    real_speed: np.ndarray
    sim_speed: np.ndarray
    dt: float

    def __len__(self):
        return len(self.steps)


def align(real: TrajectoryLog, sim: TrajectoryLog) -> AlignedLogs:
    if not np.isclose(real.dt, sim.dt):
        raise ValueError("logs use different dt")
    ids = np.union1d(real.agent_ids, sim.agent_ids)
    lo = min(real.steps.min(initial=0), sim.steps.min(initial=0))
    span = max(real.steps.max(initial=0), sim.steps.max(initial=0)) - lo + 1

    def keys(lg):
        return np.searchsorted(ids, lg.agent_ids).astype(np.int64) * span + (lg.steps - lo)

    kr, ks = keys(real), keys(sim)
    if len(np.unique(kr)) != len(kr) or len(np.unique(ks)) != len(ks):
        raise ValueError("duplicate (agent, step) sample in a log")
    _, ir, is_ = np.intersect1d(kr, ks, assume_unique=True, return_indices=True)
    return AlignedLogs(real.steps[ir], real.agent_ids[ir], real.positions[ir], sim.positions[is_],
                       real.speeds[ir], sim.speeds[is_], real.dt)


def per_step_rmse(steps: np.ndarray, sq_err: np.ndarray) -> float:
    """Mean over distinct steps of sqrt(mean squared error at that step)."""
    if len(steps) == 0:
        raise ValueError("no paired samples")
    uniq, inv = np.unique(steps, return_inverse=True)
    tot = np.bincount(inv, weights=sq_err, minlength=len(uniq))
    cnt = np.bincount(inv, minlength=len(uniq))
    return float(np.mean(np.sqrt(tot / cnt)))


def rmse(aligned: AlignedLogs, quantity: str = "position") -> float:
    """Per-step RMSE averaged over steps; velocity compares speed magnitudes."""
    if quantity == "position":
        err = np.sum((aligned.real_pos - aligned.sim_pos) ** 2, axis=1)
    elif quantity == "velocity":
        err = (aligned.real_speed - aligned.sim_speed) ** 2
    else:
        raise ValueError(f"unknown quantity {quantity!r}")
    return per_step_rmse(aligned.steps, err)


def off_road_rate(log: TrajectoryLog, net: RoadNetwork, threshold: float = OFFROAD_THRESHOLD,
                  reference: str = "edge") -> float:
    """Mean over steps of the share of live vehicles beyond ``threshold`` from the road.

    ``reference`` is "edge" (distance past the paved surface) or "centerline".
    """
    if len(log) == 0:
        raise ValueError("empty log")
    off = net.offroad_excess(log.positions, reference) > threshold
    uniq, inv = np.unique(log.steps, return_inverse=True)
    frac = np.bincount(inv, weights=off.astype(float)) / np.bincount(inv)
    return float(frac.mean())


@dataclass
class RoadAggregate:
    """Per (road, step) count, density in veh/km and mean speed (NaN when empty)."""

    road_ids: list
    steps: np.ndarray
    count: np.ndarray
    density: np.ndarray
    speed: np.ndarray
    lane_km: np.ndarray


def lane_lengths_km(net: RoadNetwork) -> np.ndarray:
    return np.array([r.length * r.lane_count for r in net.roads]) / 1000.0


def road_aggregates(log: TrajectoryLog, net: RoadNetwork, steps: np.ndarray | None = None) -> RoadAggregate:
    """Assign every sample to its nearest road and aggregate per (road, step)."""
    steps = np.unique(log.steps) if steps is None else np.asarray(steps, dtype=np.int64)
    R, S = len(net.roads), len(steps)
    keep = np.isin(log.steps, steps)
    ridx = net.project_many(log.positions[keep])[0]
    col = np.searchsorted(steps, log.steps[keep])
    flat = ridx * S + col
    count = np.bincount(flat, minlength=R * S).reshape(R, S)
    vsum = np.bincount(flat, weights=log.speeds[keep], minlength=R * S).reshape(R, S)
    lane_km = lane_lengths_km(net)
    with np.errstate(invalid="ignore", divide="ignore"):
        speed = np.where(count > 0, vsum / count, np.nan)
    return RoadAggregate(list(net.ids), steps, count, count / lane_km[:, None], speed, lane_km)


def macroscopic_rmse(real: RoadAggregate, sim: RoadAggregate, quantity: str = "density") -> float:
    """Per-step RMSE over roads, averaged over steps; empty-road speeds are skipped."""
    if real.road_ids != sim.road_ids or not np.array_equal(real.steps, sim.steps):
        raise ValueError("aggregates cover different roads or steps")
    if quantity == "density":
        a, b = real.density, sim.density
    elif quantity == "speed":
        a, b = real.speed, sim.speed
    else:
        raise ValueError(f"unknown quantity {quantity!r}")
    ok = np.isfinite(a) & np.isfinite(b)
    _, cols = np.nonzero(ok)
    return per_step_rmse(real.steps[cols], ((a - b) ** 2)[ok])


def evaluate_logs(real: TrajectoryLog, sim: TrajectoryLog, net: RoadNetwork,
                  offroad_threshold: float = OFFROAD_THRESHOLD,
                  offroad_reference: str = "edge") -> tuple[dict, RoadAggregate, RoadAggregate]:
    """All scalar metrics over the steps both logs cover."""
    first = max(real.steps.min(), sim.steps.min())
    last = min(real.steps.max(), sim.steps.max())
    if last < first:
        raise ValueError("logs do not overlap in time")
    real, sim = real.window(first, last), sim.window(first, last)
    aligned = align(real, sim)
    steps = np.arange(first, last + 1)
    ra, sa = road_aggregates(real, net, steps), road_aggregates(sim, net, steps)
    summary = {
        "position_rmse": rmse(aligned, "position"),
        "velocity_rmse": rmse(aligned, "velocity"),
        "offroad_rate": off_road_rate(sim, net, offroad_threshold, offroad_reference),
        "offroad_rate_real": off_road_rate(real, net, offroad_threshold, offroad_reference),
        "density_rmse": macroscopic_rmse(ra, sa, "density"),
        "speed_rmse": macroscopic_rmse(ra, sa, "speed"),
        "paired_samples": int(len(aligned)),
        "first_step": int(first),
        "last_step": int(last),
    }
    return summary, ra, sa


def _nanmean_rows(a: np.ndarray) -> np.ndarray:
    cnt = np.isfinite(a).sum(axis=1)
    tot = np.where(np.isfinite(a), a, 0.0).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(cnt > 0, tot / cnt, np.nan)


def emit_report(summary: dict, real: RoadAggregate, sim: RoadAggregate, out_dir) -> tuple[Path, Path]:
    """Write ``summary.json`` and the per-road ``roads.csv``; empty means are left blank."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    js = out / "summary.json"
    js.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    cols = [real.density.mean(axis=1), sim.density.mean(axis=1),
            _nanmean_rows(real.speed), _nanmean_rows(sim.speed)]
    path = out / "roads.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for k, rid in enumerate(real.road_ids):
            w.writerow([rid] + ["" if not np.isfinite(c[k]) else repr(float(c[k])) for c in cols])
    return js, path


def read_road_report(path) -> dict:
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out[row["road_id"]] = {k: (float(v) if v else np.nan) for k, v in row.items() if k != "road_id"}
    return out
