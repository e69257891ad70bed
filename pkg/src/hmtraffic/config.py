"""Run configuration: one YAML tree with a section per module.

Every key has a default; unknown keys are rejected. ``default_yaml()``
prints the full tree with all defaults.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from .graph import GraphConfig
from .ingest import LightConfig
from .rulebase import CalibrationConfig, IdmParams, MobilParams, RuleConfig
from .sim import SimConfig


@dataclass
class DataSection:
    dt: float = 0.4
    route_spacing: float = 5.0
    # tracks shorter than this (s) are dropped on load
    min_duration: float = 5.0
    speed_unit: str = "km/h"


@dataclass
class ModelSection:
    hidden: int = 64
    layers: int = 2
    embed_layers: int = 2
    leaky_slope: float = 0.2
    mean_scale: float = 10.0
    edge_scale: float = 10.0
    log_diag_min: float = -12.0
    log_diag_max: float = 8.0


@dataclass
class TrainSection:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 50
    batch: int = 8
    perturb: bool = True
    grad_clip_norm: float = 5.0
    snapshot_stride: int = 1
    val_stride: int = 1
    norm_snapshots: int = 256


@dataclass
class SimSection:
    params: SimConfig = field(default_factory=SimConfig)
    # seconds simulated; start defaults to the first recorded step
    duration: float = 800.0
    start_step: int | None = None


@dataclass
class RulesSection:
    idm: IdmParams = field(default_factory=IdmParams)
    mobil: MobilParams = field(default_factory=MobilParams)
    rule: RuleConfig = field(default_factory=RuleConfig)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    max_gap: float = 100.0


@dataclass
class MetricsSection:
    offroad_threshold: float = 1.5
    # "edge" measures past the road surface, "centerline" from the centerline
    offroad_reference: str = "edge"

    def __post_init__(self):
        if self.offroad_reference not in ("edge", "centerline"):
            raise ValueError("offroad_reference must be 'edge' or 'centerline'")


@dataclass
class SyntheticSection:
    # grid
    nx: int = 4
    ny: int = 4
    spacing: float = 120.0
    lane_width: float = 3.5
    arterial_lanes: int = 2
    # ring
    ring_roads: int = 8
    ring_radius: float = 150.0
    ring_lanes: int = 2
    # signal plan
    cycle: float = 60.0
    green: float = 30.0
    # recordings: ``days`` training/validation days then one test day
    days: int = 2
    day_duration: float = 600.0
    test_duration: float = 800.0
    arrival_rate: float = 0.47
    route_roads_min: int = 3
    route_roads_max: int = 6
    entry_clearance: float = 12.0
    v0: float = 12.0
    T_hw: float = 1.2
    s0: float = 2.0
    a_max: float = 1.5
    b_comf: float = 2.0
    v0_jitter: float = 0.1


@dataclass
class RunConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    lights: LightConfig = field(default_factory=LightConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    sim: SimSection = field(default_factory=SimSection)
    rules: RulesSection = field(default_factory=RulesSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class ConfigError(ValueError):
    pass


def _coerce(value, default, path):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, str):
            # YAML 1.1 reads exponent forms such as 1e-3 as strings
            try:
                return float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _merge(obj, data: dict, path: str = ""):
    """Copy of dataclass ``obj`` with ``data`` applied; rejects unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    names = {f.name for f in fields(obj)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join((path + '.' if path else '') + k for k in unknown)}")
    kw = {}
    for f in fields(obj):
        cur = getattr(obj, f.name)
        key = f"{path}.{f.name}" if path else f.name
        if f.name not in data:
            kw[f.name] = copy.deepcopy(cur)
        elif is_dataclass(cur):
            kw[f.name] = _merge(cur, data[f.name], key)
        elif cur is None:
            kw[f.name] = data[f.name]
        else:
            kw[f.name] = _coerce(data[f.name], cur, key)
    try:
        return type(obj)(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def from_dict(data: dict | None) -> RunConfig:
    return _merge(RunConfig(), data or {})


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    """Defaults, then the YAML file, then ``section.key=value`` overrides."""
    data: dict = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        node = data
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} conflicts with a scalar")
        node[parts[-1]] = yaml.safe_load(raw)
    return from_dict(data)


def default_yaml() -> str:
    return yaml.safe_dump(RunConfig().to_dict(), sort_keys=False)
