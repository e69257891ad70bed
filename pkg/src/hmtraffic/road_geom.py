"""Road network geometry: polyline roads, nearest-point projection, off-road distance.

Roads are centerline polylines in a local metric frame. All nearest-point
queries go through a uniform grid over centerline segments; a vectorized
exhaustive scan is used for batched queries on small networks, and both paths
return identical answers (including tie-breaking).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterable

import numpy as np

# distances within this of the minimum count as ties
TIE_TOL = 1e-9
_BRUTE_FORCE_MAX_SEGMENTS = 4096


@dataclass
class Road:
    id: Hashable
    centerline: np.ndarray
    lane_count: int = 1
    lane_width: float = 3.5
    signalized: bool = False
    successors: tuple = ()

    def __post_init__(self):
        pts = np.asarray(self.centerline, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise ValueError(f"road {self.id!r}: centerline needs >= 2 points of shape (n, 2)")
        if np.any(np.linalg.norm(np.diff(pts, axis=0), axis=1) == 0.0):
            raise ValueError(f"road {self.id!r}: consecutive centerline points must be distinct")
        if int(self.lane_count) < 1:
            raise ValueError(f"road {self.id!r}: lane_count must be >= 1")
        if not self.lane_width > 0:
            raise ValueError(f"road {self.id!r}: lane_width must be > 0")
        self.centerline = pts
        self.lane_count = int(self.lane_count)
        self.lane_width = float(self.lane_width)
        self.signalized = bool(self.signalized)
        self.successors = tuple(self.successors)

    @property
    def length(self) -> float:
        return float(np.linalg.norm(np.diff(self.centerline, axis=0), axis=1).sum())

    @property
    def width(self) -> float:
        """Total paved width, all lanes."""
        return self.lane_count * self.lane_width

    def point_at(self, arc: float) -> np.ndarray:
        return polyline_point_at(self.centerline, arc)


@dataclass(frozen=True)
class Projection:
    road_id: Hashable
    point: np.ndarray
    arc_length: float
    distance: float


def road_lane_length(road: Road) -> float:
    """Centerline length times lane count, in meters."""
    return road.length * road.lane_count


def polyline_arc_lengths(pts: np.ndarray) -> np.ndarray:
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def polyline_point_at(pts: np.ndarray, arc) -> np.ndarray:
    """Point(s) at the given arc length(s), clamped to the polyline ends."""
    pts = np.asarray(pts, dtype=float)
    cum = polyline_arc_lengths(pts)
    arc = np.clip(np.asarray(arc, dtype=float), 0.0, cum[-1])
    x = np.interp(arc, cum, pts[:, 0])
    y = np.interp(arc, cum, pts[:, 1])
    return np.stack([x, y], axis=-1)


def resample_polyline(pts: np.ndarray, spacing: float) -> np.ndarray:
    """Points every `spacing` meters along the polyline, always keeping the end point."""
    pts = np.asarray(pts, dtype=float)
    total = polyline_arc_lengths(pts)[-1]
    if total == 0.0:
        return pts[[0, -1]].copy()
    n = int(math.floor(total / spacing + 1e-9))
    arcs = np.arange(n + 1) * spacing
    if total - arcs[-1] > 1e-9:
        arcs = np.append(arcs, total)
    return polyline_point_at(pts, arcs)


def project_onto_polyline(p, pts: np.ndarray, arc_min: float = -np.inf,
                          arc_max: float = np.inf) -> tuple[np.ndarray, float, float]:
    """Nearest point on a single polyline, optionally restricted to an arc window.

    Returns (point, arc_length, distance). Ties go to the lower arc length.
    """
    pts = np.asarray(pts, dtype=float)
    p = np.asarray(p, dtype=float)
    cum = polyline_arc_lengths(pts)
    a, b = pts[:-1], pts[1:]
    seg_len = cum[1:] - cum[:-1]
    lo = np.clip((arc_min - cum[:-1]) / seg_len, 0.0, 1.0)
    hi = np.clip((arc_max - cum[:-1]) / seg_len, 0.0, 1.0)
    keep = (cum[1:] >= arc_min) & (cum[:-1] <= arc_max)
    if not keep.any():
        keep[:] = True
        lo[:], hi[:] = 0.0, 1.0
    d = b - a
    t = np.einsum("ij,ij->i", p - a, d) / (seg_len ** 2)
    t = np.clip(t, lo, hi)
    q = a + t[:, None] * d
    dist = np.linalg.norm(p - q, axis=1)
    dist[~keep] = np.inf
    best = _tie_break(dist, np.zeros(len(dist)), cum[:-1] + t * seg_len)
    return q[best], float(cum[best] + t[best] * seg_len[best]), float(dist[best])


def _tie_break(dist: np.ndarray, rank: np.ndarray, arc: np.ndarray) -> int:
    dmin = dist.min()
    cand = np.flatnonzero(dist <= dmin + TIE_TOL)
    if len(cand) == 1:
        return int(cand[0])
    order = np.lexsort((arc[cand], rank[cand]))
    return int(cand[order[0]])


class SegmentGrid:
    """Uniform grid over segments; each segment is registered in every cell its bbox touches."""

    def __init__(self, a: np.ndarray, b: np.ndarray, cell_size: float):
        self.cell_size = float(cell_size)
        self.cells: dict[tuple[int, int], list[int]] = {}
        lo = np.floor(np.minimum(a, b) / self.cell_size).astype(int)
        hi = np.floor(np.maximum(a, b) / self.cell_size).astype(int)
        for s in range(len(a)):
            for cx in range(lo[s, 0], hi[s, 0] + 1):
                for cy in range(lo[s, 1], hi[s, 1] + 1):
                    self.cells.setdefault((cx, cy), []).append(s)
        if len(a):
            allpts = np.vstack([a, b])
            self.bbox = (allpts.min(axis=0), allpts.max(axis=0))
        else:
            self.bbox = (np.zeros(2), np.zeros(2))

    def candidates(self, p: np.ndarray, radius: float) -> np.ndarray:
        """Segment ids whose bbox cells intersect the square of half-width `radius` about p."""
        lo = np.floor((p - radius) / self.cell_size).astype(int)
        hi = np.floor((p + radius) / self.cell_size).astype(int)
        ncells = (hi[0] - lo[0] + 1) * (hi[1] - lo[1] + 1)
        found: set[int] = set()
        if ncells > len(self.cells):
            for key, segs in self.cells.items():
                if lo[0] <= key[0] <= hi[0] and lo[1] <= key[1] <= hi[1]:
                    found.update(segs)
        else:
            for cx in range(lo[0], hi[0] + 1):
                for cy in range(lo[1], hi[1] + 1):
                    segs = self.cells.get((cx, cy))
                    if segs:
                        found.update(segs)
        return np.fromiter(sorted(found), dtype=int, count=len(found))


@dataclass
class RoadNetwork:
    roads: list[Road]
    cell_size: float | None = None
    _by_id: dict = field(init=False, repr=False)

    def __post_init__(self):
        if not self.roads:
            raise ValueError("road network must contain at least one road")
        ids = [r.id for r in self.roads]
        if len(set(ids)) != len(ids):
            raise ValueError("road ids must be unique")
        self._by_id = {r.id: r for r in self.roads}
        self._index_of = {r.id: k for k, r in enumerate(self.roads)}
        for r in self.roads:
            for s in r.successors:
                if s not in self._by_id:
                    raise ValueError(f"road {r.id!r}: unknown successor {s!r}")
        order = sorted(range(len(ids)), key=lambda i: _id_key(ids[i]))
        self._rank = np.empty(len(ids), dtype=int)
        self._rank[order] = np.arange(len(ids))

        a, b, ridx, arc0 = [], [], [], []
        for k, r in enumerate(self.roads):
            cum = polyline_arc_lengths(r.centerline)
            a.append(r.centerline[:-1])
            b.append(r.centerline[1:])
            ridx.append(np.full(len(r.centerline) - 1, k))
            arc0.append(cum[:-1])
        self.seg_a = np.vstack(a)
        self.seg_b = np.vstack(b)
        self.seg_road = np.concatenate(ridx)
        self.seg_arc0 = np.concatenate(arc0)
        self.seg_d = self.seg_b - self.seg_a
        self.seg_len = np.linalg.norm(self.seg_d, axis=1)
        self.seg_rank = self._rank[self.seg_road]
        self.road_half_width = np.array([0.5 * r.width for r in self.roads])
        if self.cell_size is None:
            self.cell_size = float(max(np.median(self.seg_len), 1.0))
        self.index = SegmentGrid(self.seg_a, self.seg_b, self.cell_size)

    # lookups

    def road(self, road_id) -> Road:
        return self._by_id[road_id]

    def road_index(self, road_id) -> int:
        return self._index_of[road_id]

    @property
    def ids(self) -> list:
        return [r.id for r in self.roads]

    # segment geometry

    def _seg_project(self, p: np.ndarray, segs: np.ndarray):
        a = self.seg_a[segs]
        d = self.seg_d[segs]
        t = np.einsum("ij,ij->i", p - a, d) / self.seg_len[segs] ** 2
        t = np.clip(t, 0.0, 1.0)
        q = a + t[:, None] * d
        dist = np.linalg.norm(p - q, axis=1)
        arc = self.seg_arc0[segs] + t * self.seg_len[segs]
        return q, dist, arc

    def segments_within(self, p, radius: float) -> np.ndarray:
        """Every segment id whose distance to p is <= radius."""
        p = np.asarray(p, dtype=float)
        segs = self.index.candidates(p, radius)
        if len(segs) == 0:
            return segs
        _, dist, _ = self._seg_project(p, segs)
        return segs[dist <= radius]

    def segments_within_scan(self, p, radius: float) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        segs = np.arange(len(self.seg_a))
        _, dist, _ = self._seg_project(p, segs)
        return segs[dist <= radius]

    def _best(self, p: np.ndarray, segs: np.ndarray) -> Projection:
        q, dist, arc = self._seg_project(p, segs)
        k = _tie_break(dist, self.seg_rank[segs], arc)
        road = self.roads[self.seg_road[segs[k]]]
        return Projection(road.id, q[k], float(arc[k]), float(dist[k]))

    def project(self, p) -> Projection:
        p = np.asarray(p, dtype=float)
        lo, hi = self.index.bbox
        outside = float(np.linalg.norm(np.maximum(0.0, np.maximum(lo - p, p - hi))))
        span = float(np.linalg.norm(hi - lo))
        radius = max(self.cell_size, outside)
        while True:
            segs = self.index.candidates(p, radius)
            if len(segs):
                _, dist, _ = self._seg_project(p, segs)
                if dist.min() + TIE_TOL <= radius:
                    return self._best(p, segs[dist <= radius])
            if radius > outside + span:
                return self._best(p, np.arange(len(self.seg_a)))
            radius *= 2.0

    def project_scan(self, p) -> Projection:
        """Exhaustive reference projection (no index)."""
        return self._best(np.asarray(p, dtype=float), np.arange(len(self.seg_a)))

    def project_many(self, points) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Batched projection.

        Returns (road_index, foot_points, arc_lengths, distances); road_index
        indexes `self.roads`.
        """
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        n = len(pts)
        ridx = np.empty(n, dtype=int)
        foot = np.empty((n, 2))
        arcs = np.empty(n)
        dists = np.empty(n)
        if n == 0:
            return ridx, foot, arcs, dists
        if len(self.seg_a) > _BRUTE_FORCE_MAX_SEGMENTS:
            for i, p in enumerate(pts):
                pr = self.project(p)
                ridx[i] = self.road_index(pr.road_id)
                foot[i], arcs[i], dists[i] = pr.point, pr.arc_length, pr.distance
            return ridx, foot, arcs, dists
        chunk = max(1, 200_000 // len(self.seg_a))
        for s in range(0, n, chunk):
            p = pts[s:s + chunk, None, :]
            t = np.einsum("psj,sj->ps", p - self.seg_a[None], self.seg_d) / self.seg_len ** 2
            t = np.clip(t, 0.0, 1.0)
            q = self.seg_a[None] + t[..., None] * self.seg_d[None]
            dist = np.linalg.norm(p - q, axis=2)
            arc = self.seg_arc0[None] + t * self.seg_len[None]
            dmin = dist.min(axis=1, keepdims=True)
            tied = dist <= dmin + TIE_TOL
            # lexicographic (rank, arc) among tied segments
            rank = np.where(tied, self.seg_rank[None], np.iinfo(int).max)
            tied &= rank == rank.min(axis=1, keepdims=True)
            best = np.argmin(np.where(tied, arc, np.inf), axis=1)
            rows = np.arange(len(best))
            ridx[s:s + chunk] = self.seg_road[best]
            foot[s:s + chunk] = q[rows, best]
            arcs[s:s + chunk] = arc[rows, best]
            dists[s:s + chunk] = dist[rows, best]
        return ridx, foot, arcs, dists

    def offroad_excess(self, points, reference: str = "edge") -> np.ndarray:
        """Distance beyond the road surface (edge) or from the centerline."""
        ridx, _, _, dist = self.project_many(points)
        if reference == "centerline":
            return dist
        if reference != "edge":
            raise ValueError(f"unknown off-road reference {reference!r}")
        return np.maximum(dist - self.road_half_width[ridx], 0.0)

    # serialization

    def to_json(self) -> dict:
        return {"roads": [
            {"id": r.id, "polyline": r.centerline.tolist(), "lane_count": r.lane_count,
             "lane_width": r.lane_width, "signalized": r.signalized,
             "successors": list(r.successors)}
            for r in self.roads]}

    @classmethod
    def from_json(cls, data: dict) -> "RoadNetwork":
        try:
            roads = [Road(id=_hashable(d["id"]), centerline=np.asarray(d["polyline"], dtype=float),
                          lane_count=d.get("lane_count", 1), lane_width=d.get("lane_width", 3.5),
                          signalized=d.get("signalized", False),
                          successors=tuple(_hashable(s) for s in d.get("successors", ())))
                     for d in data["roads"]]
        except KeyError as exc:
            raise ValueError(f"road network JSON missing field {exc}") from exc
        return cls(roads)


def _hashable(x):
    return tuple(x) if isinstance(x, list) else x


def _id_key(x):
    return (0, x, "") if isinstance(x, (int, float)) else (1, 0, str(x))


def build_spatial_index(roads: Iterable[Road], cell_size: float | None = None) -> RoadNetwork:
    return RoadNetwork(list(roads), cell_size=cell_size)


def project_to_network(p, net: RoadNetwork) -> Projection:
    if net is None or not net.roads:
        raise ValueError("cannot project onto an empty road network")
    return net.project(p)


def distance_to_network(p, net: RoadNetwork) -> float:
    return project_to_network(p, net).distance


def load_network(path) -> RoadNetwork:
    with open(path, encoding="utf-8") as fh:
        return RoadNetwork.from_json(json.load(fh))


def save_network(net: RoadNetwork, path) -> None:
    Path(path).write_text(json.dumps(net.to_json(), indent=1), encoding="utf-8")
