"""Offline training of the EGAT policy by Gaussian negative log-likelihood.

A snapshot is one timestep of one recording. Each epoch visits every
snapshot once in a seeded order, batching ``batch`` of them into a disjoint
graph whose loss is the mean over snapshots of the per-snapshot mean NLL.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, asdict, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .egat import (ModelConfig, ModelParams, backward, forward, init_params, load_checkpoint,
                   nll_per_step, save_checkpoint)
from .graph import GraphConfig, World, build_snapshot, light_states, merge_snapshots, routing_features
from .ingest import SignalSchedule, TrajectoryDataset
from .road_geom import RoadNetwork, polyline_arc_lengths

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 50
    batch: int = 8
    sigma_p: float = 0.5
    history_mode: str = "none"
    perturb: bool = True
    seed: int = 0
    grad_clip_norm: float | None = 5.0
    snapshot_stride: int = 1
    val_stride: int = 1
    norm_snapshots: int = 256

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.epochs < 0 or self.batch < 1:
            raise ValueError("epochs must be >= 0 and batch >= 1")
        if self.snapshot_stride < 1 or self.val_stride < 1:
            raise ValueError("strides must be >= 1")


@dataclass
class OptimizerState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "OptimizerState":
        return cls({k: np.zeros_like(v) for k, v in params.tensors.items()},
                   {k: np.zeros_like(v) for k, v in params.tensors.items()}, 0)


def clip_gradients(grads: dict, max_norm: float | None) -> tuple[dict, float]:
    """Scale all gradients together so their global L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grads, norm
    s = max_norm / norm
    return {k: g * s for k, g in grads.items()}, norm


def adam_step(params: ModelParams, grads: dict, state: OptimizerState,
              cfg: TrainConfig) -> tuple[ModelParams, OptimizerState]:
    """One bias-corrected Adam update; returns new params and state (inputs untouched)."""
    if set(grads) != set(params.tensors):
        raise ValueError("gradient names do not match parameters")
    grads, _ = clip_gradients(grads, cfg.grad_clip_norm)
    t = state.t + 1
    b1, b2 = cfg.beta1, cfg.beta2
    new = params.copy()
    m, v = {}, {}
    for k, g in grads.items():
        if g.shape != params.tensors[k].shape:
            raise ValueError(f"gradient shape mismatch for {k}")
        m[k] = b1 * state.m[k] + (1 - b1) * g
        v[k] = b2 * state.v[k] + (1 - b2) * g * g
        m_hat = m[k] / (1 - b1 ** t)
        v_hat = v[k] / (1 - b2 ** t)
        new.tensors[k] = params.tensors[k] - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return new, OptimizerState(m, v, t)


# snapshot source

def track_progress(positions: np.ndarray, route: np.ndarray) -> np.ndarray:
    """Arc position of every sample on its route, made non-decreasing."""
    a, b = route[:-1], route[1:]
    d = b - a
    L2 = np.einsum("ij,ij->i", d, d)
    L2 = np.where(L2 > 0, L2, 1.0)
    w = positions[:, None, :] - a[None]
    u = np.clip(np.einsum("nsj,sj->ns", w, d) / L2, 0.0, 1.0)
    foot = a[None] + u[..., None] * d[None]
    dist = np.linalg.norm(positions[:, None, :] - foot, axis=2)
    k = np.argmin(dist, axis=1)
    cum = polyline_arc_lengths(route)
    seg_len = np.sqrt(np.einsum("ij,ij->i", d, d))
    s = cum[k] + u[np.arange(len(k)), k] * seg_len[k]
    return np.maximum.accumulate(s)


class SnapshotSource:
    """Builds training/validation snapshots for every usable timestep of some recordings.

    Per-step quantities that do not depend on the frame jitter (progress,
    routing points, light states) are cached after first use.
    """

    def __init__(self, datasets: Sequence[TrajectoryDataset], net: RoadNetwork,
                 graph: GraphConfig, schedules=None, stride: int = 1):
        if isinstance(datasets, TrajectoryDataset):
            datasets = [datasets]
        self.datasets = list(datasets)
        self.net = net
        self.graph = graph
        if schedules is None or isinstance(schedules, SignalSchedule):
            schedules = [schedules] * len(self.datasets)
        if len(schedules) != len(self.datasets):
            raise ValueError("one schedule per dataset expected")
        self.schedules = list(schedules)
        self._dense = [d.dense() for d in self.datasets]
        self._progress = []
        for d, (pos, _, s0) in zip(self.datasets, self._dense):
            prog = np.full(pos.shape[:2], np.nan)
            for i, a in enumerate(d.agents):
                prog[i, a.start_step - s0:a.end_step - s0 + 1] = track_progress(a.positions, a.route)
            self._progress.append(prog)
        self.index = []
        for di, (pos, _, s0) in enumerate(self._dense):
            alive = ~np.isnan(pos[..., 0])
            has_next = np.zeros_like(alive)
            has_next[:, :-1] = alive[:, 1:]
            ok = np.flatnonzero((alive & has_next).any(axis=0))
            self.index.extend((di, int(k)) for k in ok[::stride])
        if not self.index:
            raise ValueError("no valid snapshots: no agent has a future step")
        self._cache: dict = {}

    def __len__(self):
        return len(self.index)

    def world(self, i: int) -> tuple[World, np.ndarray]:
        """World at snapshot ``i`` plus the dataset rows of its agents."""
        di, k = self.index[i]
        ds = self.datasets[di]
        pos, spd, s0 = self._dense[di]
        g = self.graph
        H, T = g.history_len, g.horizon
        rows = np.flatnonzero(~np.isnan(pos[:, k, 0]))
        S = pos.shape[1]

        def window(lo, hi):
            idx = np.arange(lo, hi)
            inside = (idx >= 0) & (idx < S)
            w = np.full((len(rows), len(idx), 2), np.nan)
            w[:, inside] = pos[rows][:, idx[inside]]
            m = ~np.isnan(w[..., 0])
            return np.where(m[..., None], w, 0.0), m

        fut, fmask = window(k + 1, k + 1 + T)
        if g.history_mode != "none":
            hist, hmask = window(k - H, k)
        else:
            hist = hmask = None
        w = World(
            time=(s0 + k) * ds.dt,
            agent_ids=[ds.agents[r].agent_id for r in rows],
            types=[ds.agents[r].vehicle_type for r in rows],
            positions=pos[rows, k],
            routes=[ds.agents[r].route for r in rows],
            progress=self._progress[di][rows, k],
            speeds=spd[rows, k],
            history=hist, history_mask=hmask,
            future=fut, future_mask=fmask,
            schedule=self.schedules[di],
        )
        key = (di, k)
        if key not in self._cache:
            self._cache[key] = (routing_features(w, self.net, g, w.progress), light_states(w, self.net))
        w.route_features, w.lights = self._cache[key]
        return w, rows

    def snapshot(self, i: int, rng: np.random.Generator | None = None, perturb: bool = False):
        w, _ = self.world(i)
        return build_snapshot(w, self.net, self.graph, rng, training=perturb, perturb=perturb)


def fit_normalization(source: SnapshotSource, params: ModelParams, n_max: int = 256) -> ModelParams:
    """Set the input standardization buffers from unperturbed snapshots."""
    idx = np.unique(np.linspace(0, len(source) - 1, min(n_max, len(source))).astype(int))
    x = np.concatenate([source.snapshot(int(i)).x for i in idx])
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > 1e-6, std, 1.0)
    out = params.copy()
    out.buffers["norm.mean"] = mean
    out.buffers["norm.std"] = std
    return out


def evaluate_nll(source: SnapshotSource, params: ModelParams) -> float:
    """Mean NLL per valid agent-step over all snapshots, frames unperturbed."""
    total, count = 0.0, 0
    for i in range(len(source)):
        snap = source.snapshot(i)
        nll = nll_per_step(forward(snap, params), snap.targets, snap.target_mask)
        total += float(nll.sum())
        count += int(snap.target_mask.sum())
    if count == 0:
        raise ValueError("no valid agent-steps to evaluate")
    return total / count


def batch_gradient(source: SnapshotSource, ids: Sequence[int], params: ModelParams,
                   rng: np.random.Generator, perturb: bool) -> tuple[float, dict]:
    """Mean over snapshots of the per-snapshot mean NLL, and its gradient."""
    snaps = [source.snapshot(int(i), rng, perturb) for i in ids]
    merged, owner = merge_snapshots(snaps)
    counts = np.array([s.target_mask.sum() for s in snaps], dtype=float)
    weights = 1.0 / (len(snaps) * counts[owner])
    return backward(merged, params, node_weights=weights)


@dataclass
class TrainResult:
    params: ModelParams
    best_params: ModelParams
    history: list = field(default_factory=list)
    best_epoch: int = 0
    initial_val_nll: float | None = None


def model_config_for(graph: GraphConfig, **kw) -> ModelConfig:
    return ModelConfig(node_dim=graph.node_dim, edge_dim=graph.edge_dim, horizon=graph.horizon, **kw)


def _checkpoint_extra(epoch, opt, cfg, graph, best_val):
    return ({"epoch": epoch, "adam_t": opt.t, "best_val_nll": best_val,
             "train": asdict(cfg), "graph": asdict(graph)},
            {**{f"adam_m.{k}": v for k, v in opt.m.items()},
             **{f"adam_v.{k}": v for k, v in opt.v.items()}})


def load_training_checkpoint(path):
    """(params, optimizer state, header extra) from an epoch checkpoint."""
    params, extra, ext = load_checkpoint(path, with_extra=True)
    m = {k[len("adam_m."):]: v for k, v in ext.items() if k.startswith("adam_m.")}
    v = {k[len("adam_v."):]: v for k, v in ext.items() if k.startswith("adam_v.")}
    if set(m) != set(params.tensors):
        raise ValueError(f"{path}: checkpoint has no optimizer state")
    return params, OptimizerState(m, v, int(extra.get("adam_t", 0))), extra


def train(train_source: SnapshotSource, val_source: SnapshotSource | None,
          cfg: TrainConfig, params: ModelParams | None = None, out_dir=None,
          resume=None, model_kw: dict | None = None) -> TrainResult:
    """Run ``cfg.epochs`` epochs of Adam; best-validation params are kept.

    ``resume`` is an ``epoch_NNN.egat`` path; training continues from the
    following epoch with identical random streams.
    """
    graph = train_source.graph
    start_epoch = 1
    best_val = np.inf
    if resume is not None:
        params, opt, extra = load_training_checkpoint(resume)
        start_epoch = int(extra["epoch"]) + 1
        best_val = float(extra.get("best_val_nll", np.inf))
    else:
        if params is None:
            params = init_params(model_config_for(graph, **(model_kw or {})),
                                 np.random.default_rng([cfg.seed, 0]))
            params = fit_normalization(train_source, params, cfg.norm_snapshots)
        opt = OptimizerState.zeros_like(params)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "train_log.csv"
        if resume is None or not log_path.exists():
            with open(log_path, "w", newline="") as fh:
                csv.writer(fh).writerow(["epoch", "train_nll", "val_nll", "wall_seconds"])

    init_val = None
    if val_source is not None and resume is None:
        init_val = evaluate_nll(val_source, params)
        best_val = init_val
    best = params.copy()
    result = TrainResult(params, best, [], 0, init_val)
    if out is not None and resume is None:
        extra, ext = _checkpoint_extra(0, opt, cfg, graph, best_val)
        save_checkpoint(out / "best.egat", params, extra, ext)

    n = len(train_source)
    for epoch in range(start_epoch, cfg.epochs + 1):
        t0 = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n)
        losses = []
        for b in range(0, n, cfg.batch):
            loss, grads = batch_gradient(train_source, order[b:b + cfg.batch], params, rng, cfg.perturb)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
            params, opt = adam_step(params, grads, opt, cfg)
            losses.append(loss)
        train_nll = float(np.mean(losses))
        val_nll = evaluate_nll(val_source, params) if val_source is not None else train_nll
        wall = time.perf_counter() - t0
        result.history.append((epoch, train_nll, val_nll, wall))
        log.info("epoch %d train %.4f val %.4f (%.1fs)", epoch, train_nll, val_nll, wall)
        improved = val_nll < best_val
        if improved:
            best_val = val_nll
            best = params.copy()
            result.best_epoch = epoch
        if out is not None:
            with open(out / "train_log.csv", "a", newline="") as fh:
                csv.writer(fh).writerow([epoch, repr(train_nll), repr(val_nll), f"{wall:.3f}"])
            extra, ext = _checkpoint_extra(epoch, opt, cfg, graph, best_val)
            save_checkpoint(out / f"epoch_{epoch:03d}.egat", params, extra, ext)
            if improved:
                save_checkpoint(out / "best.egat", params, extra, ext)
    result.params = params
    result.best_params = best
    return result
