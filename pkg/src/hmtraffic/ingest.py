"""Recording ingestion: parsing, local projection, resampling, day split, signal estimation.

Raw drone recordings come in a wide-row format (one row per track followed by
repeated ``lat; lon; speed; lon_acc; lat_acc; time`` groups). They are
normalized right after parsing into a long-form CSV with columns
``agent_id,type,time,x,y,speed``; every later stage reads only that form.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .road_geom import RoadNetwork, resample_polyline

log = logging.getLogger(__name__)

EARTH_RADIUS = 6371000.0
VEHICLE_TYPES = ("car", "taxi", "bus", "medium", "heavy", "motorcycle")
_TYPE_ALIASES = {
    "car": "car", "taxi": "taxi", "bus": "bus",
    "medium": "medium", "medium vehicle": "medium",
    "heavy": "heavy", "heavy vehicle": "heavy",
    "motorcycle": "motorcycle", "motorbike": "motorcycle",
}
NORMALIZED_COLUMNS = ("agent_id", "type", "time", "x", "y", "speed")
GREEN, RED, UNKNOWN = "green", "red", "unknown"


def parse_vehicle_type(name: str) -> str:
    key = " ".join(name.strip().lower().split())
    try:
        return _TYPE_ALIASES[key]
    except KeyError:
        raise ValueError(f"unknown vehicle type {name!r}") from None


@dataclass
class RawTrajectory:
    """One track. ``samples`` columns are (time, lat, lon, speed) or, once
    projected, (time, x, y, speed). Speed may be NaN when unknown."""

    agent_id: str
    vehicle_type: str
    samples: np.ndarray
    local: bool = False

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float).reshape(-1, 4)
        t = self.samples[:, 0]
        if np.any(np.diff(t) <= 0):
            raise ValueError(f"track {self.agent_id}: sample times must be strictly increasing")
        sp = self.samples[:, 3]
        if np.any(sp[~np.isnan(sp)] < 0):
            raise ValueError(f"track {self.agent_id}: negative speed")
        if self.vehicle_type not in VEHICLE_TYPES:
            raise ValueError(f"track {self.agent_id}: bad vehicle type {self.vehicle_type!r}")


def parse_recording(path, speed_unit: str = "km/h") -> list[RawTrajectory]:
    """Parse a wide-row drone recording file.

    Raises ValueError naming the 1-based line number on malformed rows.
    """
    scale = {"km/h": 1.0 / 3.6, "m/s": 1.0}[speed_unit]
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            fields = [f.strip() for f in line.strip().split(";")]
            while fields and fields[-1] == "":
                fields.pop()
            if fields[0].lower() == "track_id":
                continue
            try:
                track_id = str(int(float(fields[0])))
                vtype = parse_vehicle_type(fields[1])
                values = np.array([float(v) for v in fields[4:]], dtype=float)
                if len(fields) < 4 or len(values) % 6:
                    raise ValueError("sample groups must have 6 fields")
                groups = values.reshape(-1, 6)
                samples = np.column_stack([groups[:, 5], groups[:, 0], groups[:, 1],
                                           groups[:, 2] * scale])
                out.append(RawTrajectory(track_id, vtype, samples))
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}: malformed row at line {lineno}: {exc}") from None
    return out


def recording_centroid(raws: Sequence[RawTrajectory]) -> tuple[float, float]:
    allpts = np.vstack([r.samples[:, 1:3] for r in raws])
    lat, lon = allpts.mean(axis=0)
    return float(lat), float(lon)


def latlon_to_local(lat, lon, origin_latlon) -> tuple[np.ndarray, np.ndarray]:
    lat0, lon0 = np.radians(origin_latlon[0]), np.radians(origin_latlon[1])
    x = EARTH_RADIUS * (np.radians(lon) - lon0) * math.cos(lat0)
    y = EARTH_RADIUS * (np.radians(lat) - lat0)
    return x, y


def local_to_latlon(x, y, origin_latlon) -> tuple[np.ndarray, np.ndarray]:
    lat0, lon0 = np.radians(origin_latlon[0]), np.radians(origin_latlon[1])
    lat = np.degrees(np.asarray(y) / EARTH_RADIUS + lat0)
    lon = np.degrees(np.asarray(x) / (EARTH_RADIUS * math.cos(lat0)) + lon0)
    return lat, lon


def to_local_frame(raw: RawTrajectory, origin_latlon) -> RawTrajectory:
    """Equirectangular projection about ``origin_latlon`` (degrees)."""
    if raw.local:
        return raw
    s = raw.samples
    x, y = latlon_to_local(s[:, 1], s[:, 2], origin_latlon)
    return RawTrajectory(raw.agent_id, raw.vehicle_type,
                         np.column_stack([s[:, 0], x, y, s[:, 3]]), local=True)


# normalized long-form CSV

def write_normalized(trajs: Iterable[RawTrajectory], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(NORMALIZED_COLUMNS)
        for tr in trajs:
            if not tr.local:
                raise ValueError("normalize after projecting to the local frame")
            for t, x, y, v in tr.samples:
                w.writerow([tr.agent_id, tr.vehicle_type, repr(float(t)), repr(float(x)),
                            repr(float(y)), "" if math.isnan(v) else repr(float(v))])


def read_normalized(path) -> list[RawTrajectory]:
    rows: dict[str, list] = {}
    types: dict[str, str] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if tuple(h.strip() for h in header) != NORMALIZED_COLUMNS:
            raise ValueError(f"{path}: expected header {','.join(NORMALIZED_COLUMNS)}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            try:
                aid, vtype, t, x, y, v = rec
                vals = [float(t), float(x), float(y), float(v) if v.strip() else math.nan]
                vtype = parse_vehicle_type(vtype)
            except ValueError as exc:
                raise ValueError(f"{path}: malformed row at line {lineno}: {exc}") from None
            rows.setdefault(aid, []).append(vals)
            types[aid] = vtype
    out = []
    for aid, vals in rows.items():
        arr = np.array(vals)
        arr = arr[np.argsort(arr[:, 0], kind="stable")]
        out.append(RawTrajectory(aid, types[aid], arr, local=True))
    return out


# resampling

@dataclass
class AgentRecord:
    agent_id: str
    vehicle_type: str
    start_step: int
    positions: np.ndarray
    speeds: np.ndarray
    route: np.ndarray
    dt: float

    @property
    def n_steps(self) -> int:
        return len(self.positions)

    @property
    def end_step(self) -> int:
        """Last step index (inclusive)."""
        return self.start_step + len(self.positions) - 1

    @property
    def entry_time(self) -> float:
        return self.start_step * self.dt

    @property
    def exit_time(self) -> float:
        return self.end_step * self.dt

    def times(self) -> np.ndarray:
        return (self.start_step + np.arange(self.n_steps)) * self.dt


def _speeds_from_positions(t: np.ndarray, xy: np.ndarray) -> np.ndarray:
    if len(t) < 2:
        return np.zeros(len(t))
    vel = np.gradient(xy, t, axis=0)
    return np.linalg.norm(vel, axis=1)


def resample(raw: RawTrajectory, dt: float = 0.4, route_spacing: float = 5.0,
             min_duration: float = 0.0) -> AgentRecord | None:
    """Linear interpolation onto the global grid t_k = k * dt.

    Returns None (with a warning) for tracks with a single sample, tracks that
    cover no grid point, or tracks shorter than ``min_duration`` seconds.
    """
    if not raw.local:
        raise ValueError("resample expects a track in the local metric frame")
    s = raw.samples
    if len(s) < 2:
        log.warning("track %s has a single sample; dropped", raw.agent_id)
        return None
    t = s[:, 0]
    if t[-1] - t[0] < min_duration:
        log.debug("track %s shorter than %.1f s; dropped", raw.agent_id, min_duration)
        return None
    k0 = int(math.ceil(t[0] / dt - 1e-9))
    k1 = int(math.floor(t[-1] / dt + 1e-9))
    if k1 <= k0:
        log.warning("track %s spans fewer than two grid points; dropped", raw.agent_id)
        return None
    grid = np.clip(np.arange(k0, k1 + 1) * dt, t[0], t[-1])
    x = np.interp(grid, t, s[:, 1])
    y = np.interp(grid, t, s[:, 2])
    speed = s[:, 3]
    if np.isnan(speed).any():
        speed = _speeds_from_positions(t, s[:, 1:3])
    v = np.interp(grid, t, speed)
    pos = np.column_stack([x, y])
    return AgentRecord(raw.agent_id, raw.vehicle_type, k0, pos, v,
                       build_route(pos, route_spacing), dt)


def build_route(positions: np.ndarray, spacing: float) -> np.ndarray:
    """Arc-length resampled recorded path; stationary stretches collapse."""
    keep = [0]
    for i in range(1, len(positions)):
        if np.linalg.norm(positions[i] - positions[keep[-1]]) > 1e-6:
            keep.append(i)
    pts = positions[keep]
    if len(pts) < 2:
        return np.vstack([positions[0], positions[0] + [1e-3, 0.0]])
    return resample_polyline(pts, spacing)


@dataclass
class TrajectoryDataset:
    dt: float
    agents: list[AgentRecord]
    label: str = ""
    _dense: tuple | None = field(default=None, init=False, repr=False)

    @property
    def first_step(self) -> int:
        return min(a.start_step for a in self.agents)

    @property
    def last_step(self) -> int:
        return max(a.end_step for a in self.agents)

    def dense(self) -> tuple[np.ndarray, np.ndarray, int]:
        """(positions (A, S, 2), speeds (A, S), first_step) with NaN where absent."""
        if self._dense is None:
            s0, s1 = self.first_step, self.last_step
            n = s1 - s0 + 1
            pos = np.full((len(self.agents), n, 2), np.nan)
            spd = np.full((len(self.agents), n), np.nan)
            for i, a in enumerate(self.agents):
                sl = slice(a.start_step - s0, a.end_step - s0 + 1)
                pos[i, sl] = a.positions
                spd[i, sl] = a.speeds
            self._dense = (pos, spd, s0)
        return self._dense

    def to_trajectories(self) -> list[RawTrajectory]:
        return [RawTrajectory(a.agent_id, a.vehicle_type,
                              np.column_stack([a.times(), a.positions, a.speeds]), local=True)
                for a in self.agents]


def build_dataset(raws: Iterable[RawTrajectory], dt: float = 0.4, route_spacing: float = 5.0,
                  min_duration: float = 5.0, label: str = "") -> TrajectoryDataset:
    agents = []
    for raw in raws:
        rec = resample(raw, dt, route_spacing, min_duration)
        if rec is not None:
            agents.append(rec)
    if not agents:
        raise ValueError("no usable tracks after resampling")
    return TrajectoryDataset(dt, agents, label)


def load_dataset(path, dt: float = 0.4, route_spacing: float = 5.0,
                 min_duration: float = 5.0, label: str | None = None) -> TrajectoryDataset:
    if label is None:
        label = day_label(path)
    return build_dataset(read_normalized(path), dt, route_spacing, min_duration, label)


def day_label(path) -> str:
    """Day label from a recording file name ``<day>__<name>.csv``; the stem otherwise."""
    stem = Path(path).stem
    return stem.split("__", 1)[0]


def _natural_key(label: str):
    return [(0, int(tok), "") if tok.isdigit() else (1, 0, tok)
            for tok in re.split(r"(\d+)", str(label)) if tok]


def split_by_day(datasets: Iterable[TrajectoryDataset] | Mapping[str, object]):
    """All recordings of the last day form the test set; the rest train."""
    items = list(datasets.values()) if isinstance(datasets, Mapping) else list(datasets)
    days = sorted({d.label for d in items}, key=_natural_key)
    if len(days) < 2:
        raise ValueError("need recordings from at least two days to split")
    test_day = days[-1]
    order = sorted(items, key=lambda d: _natural_key(d.label))
    train = [d for d in order if d.label != test_day]
    test = [d for d in order if d.label == test_day]
    return train, test


# traffic-light estimation

@dataclass
class SignalSchedule:
    intervals: dict = field(default_factory=dict)

    def lookup(self, road_id, t: float) -> str:
        ivs = self.intervals.get(_key(road_id))
        if not ivs:
            return UNKNOWN
        starts = [iv[0] for iv in ivs]
        k = int(np.searchsorted(starts, t + 1e-9, side="right")) - 1
        if k < 0:
            return UNKNOWN
        start, end, state = ivs[k]
        if t < end - 1e-9 or (k == len(ivs) - 1 and t <= end + 1e-9):
            return state
        return UNKNOWN

    def to_json(self) -> dict:
        return {k: [[float(s), float(e), st] for s, e, st in v] for k, v in self.intervals.items()}

    @classmethod
    def from_json(cls, data: dict) -> "SignalSchedule":
        return cls({str(k): [(float(s), float(e), str(st)) for s, e, st in v]
                    for k, v in data.items()})

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SignalSchedule":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))

    def transitions(self, road_id) -> list[tuple[float, str, str]]:
        ivs = self.intervals.get(_key(road_id), [])
        return [(b[0], a[2], b[2]) for a, b in zip(ivs[:-1], ivs[1:]) if a[2] != b[2]]


def _key(road_id) -> str:
    return str(road_id)


@dataclass
class LightConfig:
    stop_zone: float = 20.0
    v_stop: float = 0.5
    min_phase: float = 4.0
    # head vehicle moving and not braking harder than this counts as green evidence
    green_decel: float = 0.1
    # a head vehicle within approach_zone that starts braking harder than this counts as red
    approach_zone: float = 60.0
    red_decel: float = 2.0


def _labels_to_intervals(labels: list, t0: float, dt: float, min_phase: float) -> list:
    """Per-step labels (None = unobserved) to merged (start, end, state) intervals."""
    n = len(labels)
    if all(lbl is None for lbl in labels):
        return [(t0, t0 + n * dt, UNKNOWN)]
    filled = list(labels)
    # a gap takes the state of the next observation: a light can only be seen
    # switching once the evidence for the new phase appears
    nxt = None
    for k in range(n - 1, -1, -1):
        if filled[k] is None:
            filled[k] = nxt
        else:
            nxt = filled[k]
    last = None
    for k in range(n):
        if filled[k] is None:
            filled[k] = last
        last = filled[k]
    runs = []
    for k, s in enumerate(filled):
        if runs and runs[-1][2] == s:
            runs[-1][1] = k + 1
        else:
            runs.append([k, k + 1, s])
    min_len = min_phase / dt - 1e-9
    while len(runs) > 1:
        lens = [r[1] - r[0] for r in runs]
        k = int(np.argmin(lens))
        if lens[k] >= min_len:
            break
        if k == 0:
            j = 1
        elif k == len(runs) - 1:
            j = k - 1
        else:
            j = k - 1 if lens[k - 1] >= lens[k + 1] else k + 1
        runs[k][2] = runs[j][2]
        merged = [runs[0]]
        for r in runs[1:]:
            if r[2] == merged[-1][2]:
                merged[-1][1] = r[1]
            else:
                merged.append(r)
        runs = merged
    return [(t0 + a * dt, t0 + b * dt, s) for a, b, s in runs]


def estimate_traffic_lights(dataset: TrajectoryDataset, net: RoadNetwork,
                            cfg: LightConfig | None = None) -> SignalSchedule:
    """Infer green/red phases of signalized roads from stopping and crossing behaviour.

    Per step, a road is red when its head vehicle inside the stop zone is
    stopped and does not advance; green when a vehicle leaves the road across
    its end from inside the stop zone, or the head vehicle moves without
    braking; and red from the step where the vehicle nearest the end starts
    braking hard. Unlabeled steps take the next observed state, and phases
    shorter than ``min_phase`` are merged into their longer neighbour.
    """
    cfg = cfg or LightConfig()
    signalized = [k for k, r in enumerate(net.roads) if r.signalized]
    if not signalized:
        raise ValueError("network has no signalized roads")
    pos, spd, s0 = dataset.dense()
    A, S = spd.shape
    valid = ~np.isnan(spd)
    ridx = np.full((A, S), -1)
    arc = np.full((A, S), np.nan)
    flat = pos[valid]
    r, _, a, _ = net.project_many(flat)
    ridx[valid] = r
    arc[valid] = a
    lengths = np.array([rd.length for rd in net.roads])
    dt = dataset.dt
    t0 = s0 * dt

    out = {}
    for k in signalized:
        L = lengths[k]
        on = ridx == k
        zone = on & (arc >= L - cfg.stop_zone)
        approach = on & (arc >= L - cfg.approach_zone)
        labels: list = [None] * S
        for step in range(S):
            if step >= 2:
                near = np.flatnonzero(approach[:, step])
                if len(near):
                    lead = near[np.argmax(arc[near, step])]
                    if approach[lead, step - 1] and approach[lead, step - 2]:
                        a_now = (spd[lead, step] - spd[lead, step - 1]) / dt
                        a_before = (spd[lead, step - 1] - spd[lead, step - 2]) / dt
                        if a_now < -cfg.red_decel and a_before >= -cfg.red_decel:
                            # the light changed before the braking step began
                            labels[step - 1] = RED
            if step > 0:
                left = zone[:, step - 1] & valid[:, step] & ~on[:, step]
                if left.any():
                    labels[step - 1] = GREEN
            in_zone = np.flatnonzero(zone[:, step])
            if len(in_zone) == 0 or step == 0:
                continue
            head = in_zone[np.argmax(arc[in_zone, step])]
            if not on[head, step - 1]:
                continue
            advance = arc[head, step] - arc[head, step - 1]
            v = spd[head, step]
            accel = (v - spd[head, step - 1]) / dt
            if v < cfg.v_stop and advance < cfg.v_stop * dt:
                labels[step] = RED
            elif labels[step] is None and v >= cfg.v_stop and accel >= -cfg.green_decel:
                labels[step] = GREEN
        out[_key(net.roads[k].id)] = _labels_to_intervals(labels, t0, dt, cfg.min_phase)
    return SignalSchedule(out)
