"""Command-line entry point: ``hmtraffic <subcommand> ...``.

Each subcommand writes only into ``--out`` and leaves a ``manifest.json``
there. Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure; on
failure a JSON error object goes to stderr.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .config import ConfigError, RunConfig, default_yaml, load_config
from .egat import load_checkpoint
from .graph import GraphConfig
from .ingest import (SignalSchedule, build_dataset, day_label, estimate_traffic_lights,
                     parse_recording, read_normalized, recording_centroid, to_local_frame,
                     write_normalized)
from .metrics import TrajectoryLog, emit_report, evaluate_logs
from .road_geom import load_network, save_network
from .rulebase import (calibrate_idm, extract_following_tuples, idm_mse, load_params, rule_step,
                       save_params)
from .sim import ConstantVelocityPolicy, EgatPolicy, initial_state, run, run_policy, write_log
from .synthetic import (TrafficConfig, fixed_cycle_schedule, generate_traffic, grid_network,
                        ring_network)
from .train import SnapshotSource, TrainConfig, train

log = logging.getLogger("hmtraffic")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _input_files(paths) -> list[Path]:
    out = []
    for p in paths:
        p = Path(p)
        out.extend(sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p])
    return out


def write_manifest(out: Path, command: str, cfg: RunConfig, inputs, argv) -> Path:
    files = _input_files(inputs)
    for f in files:
        if not f.exists():
            raise FileNotFoundError(f"input not found: {f}")
    manifest = {
        "command": command,
        "argv": list(argv),
        "version": __version__,
        "seed": cfg.seed,
        "config_hash": cfg.hash(),
        "config": cfg.to_dict(),
        "inputs": {str(f): _sha256(f) for f in files},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# data loading helpers

def _load_datasets(paths, cfg: RunConfig):
    out = []
    for p in paths:
        ds = build_dataset(read_normalized(p), cfg.data.dt, cfg.data.route_spacing,
                           cfg.data.min_duration, label=day_label(p))
        out.append(ds)
    return out


def _schedules_for(lights, datasets):
    """One schedule per dataset from a single file or a directory of ``lights_<label>.json``."""
    if lights is None:
        return [None] * len(datasets)
    p = Path(lights)
    if p.is_dir():
        out = []
        for ds in datasets:
            f = p / f"lights_{ds.label}.json"
            if not f.exists():
                raise FileNotFoundError(f"no light schedule for day {ds.label!r} in {p}")
            out.append(SignalSchedule.load(f))
        return out
    sch = SignalSchedule.load(p)
    return [sch] * len(datasets)


# subcommands

def cmd_ingest(args, cfg: RunConfig, out: Path):
    files = _input_files(args.input)
    if not files:
        raise FileNotFoundError("no input recordings")
    if args.format == "pneuma":
        recs = {f: parse_recording(f, cfg.data.speed_unit) for f in files}
        origin = recording_centroid([r for rs in recs.values() for r in rs])
        (out / "origin.json").write_text(json.dumps({"lat": origin[0], "lon": origin[1]}) + "\n")
        recs = {f: [to_local_frame(r, origin) for r in rs] for f, rs in recs.items()}
    else:
        recs = {f: read_normalized(f) for f in files}
    for f, raws in recs.items():
        label = day_label(f)
        ds = build_dataset(raws, cfg.data.dt, cfg.data.route_spacing, cfg.data.min_duration, label)
        write_normalized(ds.to_trajectories(), out / f"{label}.csv")
        log.info("%s: %d tracks", label, len(ds.agents))
    return files


def cmd_estimate_lights(args, cfg, out):
    net = load_network(args.network)
    for ds in _load_datasets(args.data, cfg):
        estimate_traffic_lights(ds, net, cfg.lights).save(out / f"lights_{ds.label}.json")
    return [args.network, *args.data]


def cmd_train(args, cfg, out):
    net = load_network(args.network)
    graph = cfg.graph
    tr_ds = _load_datasets(args.train, cfg)
    va_ds = _load_datasets(args.val, cfg) if args.val else []
    tr = SnapshotSource(tr_ds, net, graph, _schedules_for(args.lights, tr_ds), cfg.train.snapshot_stride)
    va = (SnapshotSource(va_ds, net, graph, _schedules_for(args.lights, va_ds), cfg.train.val_stride)
          if va_ds else None)
    t = cfg.train
    tcfg = TrainConfig(t.lr, t.beta1, t.beta2, t.eps, t.epochs, t.batch, graph.sigma_p, graph.history_mode,
                       t.perturb, cfg.seed, t.grad_clip_norm, t.snapshot_stride, t.val_stride,
                       t.norm_snapshots)
    model_kw = asdict(cfg.model)
    res = train(tr, va, tcfg, out_dir=out, resume=args.resume, model_kw=model_kw)
    if res.history:
        e, trn, val, _ = res.history[-1]
        log.info("finished epoch %d: train %.4f val %.4f (best epoch %d)", e, trn, val, res.best_epoch)
    inputs = [args.network, *args.train, *(args.val or [])]
    if args.lights:
        inputs.append(args.lights)
    if args.resume:
        inputs.append(args.resume)
    return inputs


def cmd_calibrate(args, cfg, out):
    net = load_network(args.network)
    tuples = np.vstack([extract_following_tuples(ds, net, cfg.rules.rule.veh_length, cfg.rules.max_gap)
                        for ds in _load_datasets(args.data, cfg)])
    if len(tuples) == 0:
        raise ValueError("no leader-follower pairs found in the data")
    params, history = calibrate_idm(tuples, cfg.rules.idm, cfg.rules.calibration, cfg.rules.rule.b_emergency)
    save_params(out / "idm.json", params, cfg.rules.mobil)
    with open(out / "calibration_log.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "mse"])
        for it, loss in history:
            w.writerow([it, repr(loss)])
    log.info("calibrated on %d tuples: mse %.5f -> %.5f", len(tuples), history[0][1],
             idm_mse(params, tuples))
    return [args.network, *args.data]


def cmd_simulate(args, cfg, out):
    net = load_network(args.network)
    (ds,) = _load_datasets([args.data], cfg)
    (schedule,) = _schedules_for(args.lights, [ds])
    graph = cfg.graph
    s = cfg.sim
    state = initial_state(ds, s.start_step, s.duration, schedule, graph.history_len)
    rng = np.random.default_rng([cfg.seed, 1])
    inputs = [args.network, args.data] + ([args.lights] if args.lights else [])
    if args.policy == "idm":
        idm, mobil = (load_params(args.params) if args.params else (cfg.rules.idm, cfg.rules.mobil))
        rows = run(state, lambda st: rule_step(st, idm, mobil, net, schedule, cfg.rules.rule), s.duration)
        inputs += [args.params] if args.params else []
    elif args.policy == "cv":
        rows = run_policy(state, ConstantVelocityPolicy(graph.horizon), net, s.duration, s.params, rng)
    else:
        if not args.checkpoint:
            raise UsageError("--policy egat needs --checkpoint")
        params, extra, _ = load_checkpoint(args.checkpoint, with_extra=True)
        if "graph" in extra:
            graph = GraphConfig(**extra["graph"])
        policy = EgatPolicy(params, graph, s.params.sample_mode)
        rows = run_policy(state, policy, net, s.duration, s.params, rng)
        inputs.append(args.checkpoint)
    write_log(rows, out / "sim.csv")
    log.info("simulated %.0f s, %d rows", s.duration, len(rows))
    return inputs


def cmd_evaluate(args, cfg, out):
    net = load_network(args.network)
    dt = cfg.data.dt
    real = TrajectoryLog.from_csv(args.real, dt)
    sim = TrajectoryLog.from_csv(args.sim, dt)
    if len(real) == 0 or len(sim) == 0:
        raise ValueError("empty trajectory log")
    summary, ra, sa = evaluate_logs(real, sim, net, cfg.metrics.offroad_threshold,
                                   cfg.metrics.offroad_reference)
    emit_report(summary, ra, sa, out)
    log.info("%s", json.dumps(summary, sort_keys=True))
    return [args.network, args.real, args.sim]


def cmd_make_synthetic(args, cfg, out):
    sc = cfg.synthetic
    if args.topology == "grid":
        net = grid_network(sc.nx, sc.ny, sc.spacing, sc.lane_width, sc.arterial_lanes)
    else:
        net = ring_network(sc.ring_roads, sc.ring_radius, sc.ring_lanes, sc.lane_width)
    horizon = max(sc.day_duration, sc.test_duration) + sc.cycle
    schedule = fixed_cycle_schedule(net, horizon, sc.cycle, sc.green)
    save_network(net, out / "network.json")
    schedule.save(out / "lights.json")
    base = replace(cfg.rules.idm, v0=sc.v0, T_hw=sc.T_hw, s0=sc.s0, a_max=sc.a_max, b_comf=sc.b_comf)
    for d in range(1, sc.days + 2):
        label = f"day{d}"
        dur = sc.test_duration if d == sc.days + 1 else sc.day_duration
        tc = TrafficConfig(duration=dur, dt=cfg.data.dt, arrival_rate=sc.arrival_rate,
                           route_roads=(sc.route_roads_min, sc.route_roads_max),
                           entry_clearance=sc.entry_clearance, base_idm=base,
                           v0_jitter=sc.v0_jitter, route_spacing=cfg.data.route_spacing)
        ds = generate_traffic(net, schedule, np.random.default_rng([cfg.seed, d]), tc, label,
                              mobil=cfg.rules.mobil, rule=cfg.rules.rule)
        write_normalized(ds.to_trajectories(), out / f"{label}.csv")
        log.info("%s: %d tracks over %.0f s", label, len(ds.agents), dur)
    return []


COMMANDS = {
    "ingest": cmd_ingest,
    "estimate-lights": cmd_estimate_lights,
    "train": cmd_train,
    "calibrate-idm": cmd_calibrate,
    "simulate": cmd_simulate,
    "evaluate": cmd_evaluate,
    "make-synthetic": cmd_make_synthetic,
}


def build_parser() -> Parser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    common = Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (overrides config)")
    common.add_argument("--config", default=None, help="YAML run configuration")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="config override, e.g. train.epochs=10")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")

    p = Parser(prog="hmtraffic", description="History-masked traffic simulation toolkit.",
               formatter_class=fmt)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--print-config", action="store_true", help="print the default config and exit")
    sub = p.add_subparsers(dest="command", parser_class=Parser)

    s = sub.add_parser("ingest", parents=[common], formatter_class=fmt,
                       help="parse recordings into resampled normalized CSVs")
    s.add_argument("input", nargs="+", help="recording files or directories")
    s.add_argument("--format", choices=("pneuma", "normalized"), default="pneuma")

    s = sub.add_parser("estimate-lights", parents=[common], formatter_class=fmt,
                       help="infer signal schedules from stopping behaviour")
    s.add_argument("--network", required=True)
    s.add_argument("--data", nargs="+", required=True, help="normalized CSV per day")

    s = sub.add_parser("train", parents=[common], formatter_class=fmt, help="train the EGAT policy")
    s.add_argument("--network", required=True)
    s.add_argument("--train", nargs="+", required=True, help="training day CSVs")
    s.add_argument("--val", nargs="*", default=None, help="validation day CSVs")
    s.add_argument("--lights", default=None, help="schedule JSON, or directory of lights_<day>.json")
    s.add_argument("--resume", default=None, help="epoch checkpoint to continue from")
    s.add_argument("--epochs", type=int, default=None, help="overrides train.epochs")
    s.add_argument("--history-mode", choices=("none", "all", "context_only"), default=None,
                   help="overrides graph.history_mode")
    s.add_argument("--no-perturb", action="store_true", help="disable frame-origin perturbation")

    s = sub.add_parser("calibrate-idm", parents=[common], formatter_class=fmt,
                       help="fit IDM parameters to recorded car following")
    s.add_argument("--network", required=True)
    s.add_argument("--data", nargs="+", required=True)

    s = sub.add_parser("simulate", parents=[common], formatter_class=fmt, help="closed-loop rollout")
    s.add_argument("--policy", choices=("egat", "idm", "cv"), required=True)
    s.add_argument("--network", required=True)
    s.add_argument("--data", required=True, help="recording providing initial states and entries")
    s.add_argument("--lights", default=None, help="schedule JSON, or directory of lights_<day>.json")
    s.add_argument("--checkpoint", default=None, help="EGAT checkpoint (policy egat)")
    s.add_argument("--params", default=None, help="IDM/MOBIL JSON (policy idm)")
    s.add_argument("--duration", type=float, default=None, help="overrides sim.duration (s)")

    s = sub.add_parser("evaluate", parents=[common], formatter_class=fmt,
                       help="compare a simulated log against the recording")
    s.add_argument("--network", required=True)
    s.add_argument("--real", required=True)
    s.add_argument("--sim", required=True)

    s = sub.add_parser("make-synthetic", parents=[common], formatter_class=fmt,
                       help="generate a network, signal plan and IDM recordings")
    s.add_argument("--topology", choices=("grid", "ring"), default="grid")
    return p


def _resolve_config(args) -> RunConfig:
    sets = list(args.set)
    if args.seed is not None:
        sets.append(f"seed={args.seed}")
    if getattr(args, "epochs", None) is not None:
        sets.append(f"train.epochs={args.epochs}")
    if getattr(args, "history_mode", None) is not None:
        sets.append(f"graph.history_mode={args.history_mode}")
    if getattr(args, "no_perturb", False):
        sets.append("train.perturb=false")
    if getattr(args, "duration", None) is not None:
        sets.append(f"sim.duration={args.duration}")
    return load_config(args.config, sets)


def _fail(code: int, exc: BaseException) -> int:
    err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    sys.stderr.write(json.dumps(err) + "\n")
    return code


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.print_config:
            sys.stdout.write(default_yaml())
            return EXIT_OK
        if args.command is None:
            raise UsageError("a subcommand is required")
        cfg = _resolve_config(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    except (ConfigError, yaml.YAMLError) as exc:
        return _fail(EXIT_USAGE, exc)
    except OSError as exc:
        return _fail(EXIT_DATA, exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        inputs = COMMANDS[args.command](args, cfg, out)
        write_manifest(out, args.command, cfg, inputs, argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    except FloatingPointError as exc:
        return _fail(EXIT_NUMERIC, exc)
    except (ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        return _fail(EXIT_DATA, exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
