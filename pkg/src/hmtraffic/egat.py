"""Edge-enhanced graph attention network with a Gaussian trajectory head.

Forward pass:  node MLP embedding -> L attention layers -> linear head giving,
per node and future step, a 2-D mean and a Cholesky-factored covariance.
Each attention layer mixes messages ``W [h_i || e_ij || h_j]`` over the
in-neighbourhood of ``i`` (self-loop included) with softmax weights from a
leaky-ReLU score ``a . [h_i || e_ij || h_j]``, then applies ELU.

Gradients are written out by hand (reverse mode, float64) for exactly this
architecture; there is no general autodiff here.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .graph import GraphSnapshot

LOG_2PI = float(np.log(2.0 * np.pi))
MAGIC = b"EGAT"
FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    node_dim: int
    edge_dim: int = 2
    hidden: int = 64
    layers: int = 2
    embed_layers: int = 2
    horizon: int = 10
    leaky_slope: float = 0.2
    mean_scale: float = 10.0
    edge_scale: float = 10.0
    log_diag_min: float = -12.0
    log_diag_max: float = 8.0


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict = field(default_factory=dict)
    # input standardization; fixed during training
    buffers: dict = field(default_factory=dict)

    def names(self) -> list[str]:
        return list(self.tensors)

    def copy(self) -> "ModelParams":
        return ModelParams(ModelConfig(**asdict(self.config)),
                           {k: v.copy() for k, v in self.tensors.items()},
                           {k: v.copy() for k, v in self.buffers.items()})

    def n_parameters(self) -> int:
        return sum(v.size for v in self.tensors.values())


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    d = config.hidden
    t: dict[str, np.ndarray] = {}

    def glorot(n_in, n_out):
        lim = np.sqrt(6.0 / (n_in + n_out))
        return rng.uniform(-lim, lim, (n_in, n_out))

    n_in = config.node_dim
    for k in range(config.embed_layers):
        t[f"embed.{k}.W"] = glorot(n_in, d)
        t[f"embed.{k}.b"] = np.zeros(d)
        n_in = d
    cat = 2 * d + config.edge_dim
    for k in range(config.layers):
        t[f"egat.{k}.W"] = glorot(cat, d)
        t[f"egat.{k}.a"] = rng.uniform(-1.0, 1.0, cat) * np.sqrt(3.0 / cat)
    t["head.W"] = glorot(d, 5 * config.horizon) * 0.1
    t["head.b"] = np.zeros(5 * config.horizon)
    buffers = {"norm.mean": np.zeros(config.node_dim), "norm.std": np.ones(config.node_dim)}
    return ModelParams(config, t, buffers)


@dataclass
class GaussianPrediction:
    """Per node and step: mean (N, T, 2) and Cholesky factor entries (N, T, 3) = (l11, l21, l22)."""

    mean: np.ndarray
    chol: np.ndarray

    @property
    def covariance(self) -> np.ndarray:
        l11, l21, l22 = self.chol[..., 0], self.chol[..., 1], self.chol[..., 2]
        cov = np.empty(self.mean.shape + (2,))
        cov[..., 0, 0] = l11 * l11
        cov[..., 0, 1] = cov[..., 1, 0] = l11 * l21
        cov[..., 1, 1] = l21 * l21 + l22 * l22
        return cov

    def as_array(self) -> np.ndarray:
        """(N, T, 5): mean x, mean y, l11, l21, l22."""
        return np.concatenate([self.mean, self.chol], axis=-1)


# activations

def elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def elu_grad(x):
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


def leaky(x, slope):
    return np.where(x > 0, x, slope * x)


def leaky_grad(x, slope):
    return np.where(x > 0, 1.0, slope)


# graph primitives

def _scatter_matrix(dst: np.ndarray, n: int) -> sp.csr_matrix:
    e = len(dst)
    return sp.csr_matrix((np.ones(e), (dst, np.arange(e))), shape=(n, e))


def segment_softmax(logits: np.ndarray, dst: np.ndarray, n: int, scatter=None) -> np.ndarray:
    scatter = _scatter_matrix(dst, n) if scatter is None else scatter
    mx = np.full(n, -np.inf)
    np.maximum.at(mx, dst, logits)
    ex = np.exp(logits - mx[dst])
    den = scatter @ ex
    return ex / den[dst]


def _concat(h, src, dst, e):
    return np.concatenate([h[dst], e, h[src]], axis=1)


def attention_coefficients(h, src, dst, edge_attr, a, slope: float = 0.2) -> np.ndarray:
    """Softmax over each node's in-edges of leaky(a . [h_i || e_ij || h_j])."""
    c = _concat(h, src, dst, edge_attr)
    return segment_softmax(leaky(c @ a, slope), dst, len(h))


def egat_layer(h, src, dst, edge_attr, W, a, slope: float = 0.2) -> np.ndarray:
    c = _concat(h, src, dst, edge_attr)
    alpha = segment_softmax(leaky(c @ a, slope), dst, len(h))
    agg = _scatter_matrix(dst, len(h)) @ (alpha[:, None] * (c @ W))
    return elu(agg)


# forward / loss / backward

def _head_to_prediction(out: np.ndarray, cfg: ModelConfig) -> GaussianPrediction:
    o = out.reshape(len(out), cfg.horizon, 5)
    mean = cfg.mean_scale * o[..., :2]
    l11 = np.exp(np.clip(o[..., 2], cfg.log_diag_min, cfg.log_diag_max))
    l22 = np.exp(np.clip(o[..., 4], cfg.log_diag_min, cfg.log_diag_max))
    return GaussianPrediction(mean, np.stack([l11, o[..., 3], l22], axis=-1))


def _check_widths(snap: GraphSnapshot, cfg: ModelConfig):
    if snap.x.shape[1] != cfg.node_dim:
        raise ValueError(f"node feature width {snap.x.shape[1]} != model width {cfg.node_dim}")
    if snap.edge_attr.shape[1] != cfg.edge_dim:
        raise ValueError(f"edge feature width {snap.edge_attr.shape[1]} != model width {cfg.edge_dim}")


def _forward(snap: GraphSnapshot, params: ModelParams):
    cfg = params.config
    _check_widths(snap, cfg)
    t = params.tensors
    n = snap.n_nodes
    src, dst = snap.src, snap.dst
    e = snap.edge_attr / cfg.edge_scale
    scatter = _scatter_matrix(dst, n)
    cache = {"scatter": scatter, "e": e, "embed": [], "layers": []}
    h = (snap.x - params.buffers["norm.mean"]) / params.buffers["norm.std"]
    for k in range(cfg.embed_layers):
        u = h @ t[f"embed.{k}.W"] + t[f"embed.{k}.b"]
        cache["embed"].append((h, u))
        h = elu(u)
    for k in range(cfg.layers):
        c = _concat(h, src, dst, e)
        s = c @ t[f"egat.{k}.a"]
        alpha = segment_softmax(leaky(s, cfg.leaky_slope), dst, n, scatter)
        m = c @ t[f"egat.{k}.W"]
        agg = scatter @ (alpha[:, None] * m)
        cache["layers"].append((c, s, alpha, m, agg))
        h = elu(agg)
    out = h @ t["head.W"] + t["head.b"]
    cache["h_last"] = h
    return out, cache


def forward(snap: GraphSnapshot, params: ModelParams) -> GaussianPrediction:
    out, _ = _forward(snap, params)
    return _head_to_prediction(out, params.config)


def _step_nll(pred: GaussianPrediction, targets: np.ndarray):
    r = targets - pred.mean
    l11, l21, l22 = pred.chol[..., 0], pred.chol[..., 1], pred.chol[..., 2]
    z1 = r[..., 0] / l11
    z2 = (r[..., 1] - l21 * z1) / l22
    nll = 0.5 * (z1 * z1 + z2 * z2) + np.log(l11) + np.log(l22) + LOG_2PI
    return nll, z1, z2


def nll_per_step(pred: GaussianPrediction, targets: np.ndarray,
                 mask: np.ndarray | None = None) -> np.ndarray:
    """(N, T) negative log-density of each target; 0 where masked out."""
    targets = np.asarray(targets, dtype=float)
    if mask is None:
        mask = np.ones(targets.shape[:2], dtype=bool)
    if not np.all(np.isfinite(targets[mask])):
        raise ValueError("targets must be finite")
    nll, _, _ = _step_nll(pred, np.where(mask[..., None], targets, pred.mean))
    return np.where(mask, nll, 0.0)


def nll_loss(pred: GaussianPrediction, targets: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Summed negative log-likelihood over agents and steps."""
    return float(nll_per_step(pred, targets, mask).sum())


def backward(snap: GraphSnapshot, params: ModelParams, targets: np.ndarray | None = None,
             mask: np.ndarray | None = None, node_weights: np.ndarray | None = None):
    """Loss ``sum_m w_m sum_t nll[m, t]`` and its gradient for every tensor.

    Targets and mask default to the snapshot's; weights default to 1.
    """
    cfg = params.config
    t = params.tensors
    targets = snap.targets if targets is None else targets
    mask = snap.target_mask if mask is None else mask
    if targets is None:
        raise ValueError("backward needs targets")
    if mask is None:
        mask = np.ones(targets.shape[:2], dtype=bool)
    if not np.all(np.isfinite(targets[mask])):
        raise ValueError("targets must be finite")
    n = snap.n_nodes
    w = np.ones(n) if node_weights is None else np.asarray(node_weights, dtype=float)

    out, cache = _forward(snap, params)
    pred = _head_to_prediction(out, cfg)
    tgt = np.where(mask[..., None], targets, pred.mean)
    nll, z1, z2 = _step_nll(pred, tgt)
    wm = np.where(mask, w[:, None], 0.0)
    loss = float((wm * nll).sum())

    l11, l21, l22 = pred.chol[..., 0], pred.chol[..., 1], pred.chol[..., 2]
    g_z1 = z1 - z2 * l21 / l22
    d_r1 = g_z1 / l11
    d_r2 = z2 / l22
    d_l11 = -g_z1 * z1 / l11 + 1.0 / l11
    d_l21 = -z2 * z1 / l22
    d_l22 = -z2 * z2 / l22 + 1.0 / l22
    o = out.reshape(n, cfg.horizon, 5)
    in2 = (o[..., 2] > cfg.log_diag_min) & (o[..., 2] < cfg.log_diag_max)
    in4 = (o[..., 4] > cfg.log_diag_min) & (o[..., 4] < cfg.log_diag_max)
    d_o = np.stack([
        -d_r1 * cfg.mean_scale,
        -d_r2 * cfg.mean_scale,
        d_l11 * l11 * in2,
        d_l21,
        d_l22 * l22 * in4,
    ], axis=-1) * wm[..., None]
    d_out = d_o.reshape(n, -1)

    grads: dict[str, np.ndarray] = {}
    h = cache["h_last"]
    grads["head.W"] = h.T @ d_out
    grads["head.b"] = d_out.sum(axis=0)
    dh = d_out @ t["head.W"].T

    src, dst = snap.src, snap.dst
    scatter = cache["scatter"]
    d = cfg.hidden
    de = cfg.edge_dim
    for k in reversed(range(cfg.layers)):
        c, s, alpha, m, agg = cache["layers"][k]
        W, a = t[f"egat.{k}.W"], t[f"egat.{k}.a"]
        d_agg = dh * elu_grad(agg)
        d_agg_e = d_agg[dst]
        d_m = alpha[:, None] * d_agg_e
        d_alpha = np.einsum("ij,ij->i", m, d_agg_e)
        grads[f"egat.{k}.W"] = c.T @ d_m
        d_c = d_m @ W.T
        # softmax backward within each destination segment
        seg = scatter @ (alpha * d_alpha)
        d_g = alpha * (d_alpha - seg[dst])
        d_s = d_g * leaky_grad(s, cfg.leaky_slope)
        grads[f"egat.{k}.a"] = c.T @ d_s
        d_c += d_s[:, None] * a[None, :]
        dh = scatter @ d_c[:, :d]
        dh += _scatter_matrix(src, n) @ d_c[:, d + de:]

    for k in reversed(range(cfg.embed_layers)):
        h_in, u = cache["embed"][k]
        d_u = dh * elu_grad(u)
        grads[f"embed.{k}.W"] = h_in.T @ d_u
        grads[f"embed.{k}.b"] = d_u.sum(axis=0)
        dh = d_u @ t[f"embed.{k}.W"].T
    return loss, {name: grads[name] for name in t}


# checkpoint I/O

def save_checkpoint(path, params: ModelParams, extra: dict | None = None,
                    extra_tensors: dict | None = None) -> None:
    """Write the EGAT binary checkpoint.

    Layout: magic ``EGAT``, u32 version, u32 header length, JSON header,
    then float64 little-endian tensors at the header's byte offsets.
    """
    named = [(f"param.{k}", v) for k, v in params.tensors.items()]
    named += [(f"buffer.{k}", v) for k, v in params.buffers.items()]
    named += [(f"extra.{k}", v) for k, v in (extra_tensors or {}).items()]
    table, off = [], 0
    for name, v in named:
        table.append({"name": name, "shape": list(v.shape), "offset": off})
        off += v.size * 8
    header = json.dumps({"config": asdict(params.config), "tensors": table,
                         "extra": extra or {}}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        for _, v in named:
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path, with_extra: bool = False):
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not an EGAT checkpoint")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    base = 12 + hlen
    tensors, buffers, extra_t = {}, {}, {}
    for ent in header["tensors"]:
        size = int(np.prod(ent["shape"], dtype=int))
        start = base + ent["offset"]
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=start).reshape(ent["shape"]).copy()
        kind, name = ent["name"].split(".", 1)
        {"param": tensors, "buffer": buffers, "extra": extra_t}[kind][name] = arr
    params = ModelParams(ModelConfig(**header["config"]), tensors, buffers)
    if with_extra:
        return params, header.get("extra", {}), extra_t
    return params
