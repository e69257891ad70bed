import logging
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hmtraffic.ingest import (GREEN, RED, UNKNOWN, RawTrajectory, SignalSchedule, TrajectoryDataset,
                              build_dataset, day_label, estimate_traffic_lights, latlon_to_local,
                              load_dataset, local_to_latlon, parse_recording, read_normalized,
                              resample, split_by_day, to_local_frame, write_normalized)
from hmtraffic.road_geom import Road, RoadNetwork

import oracles

HEADER = "track_id; type; traveled_d; avg_speed; lat; lon; speed; lon_acc; lat_acc; time\n"


def _row(tid, vtype, samples):
    head = f"{tid}; {vtype}; 10.0; 5.0"
    groups = "; ".join(f"{lat}; {lon}; {v}; 0.0; 0.0; {t}" for t, lat, lon, v in samples)
    return f"{head}; {groups};\n"


def test_parse_single_track(tmp_path):
    p = tmp_path / "rec.csv"
    p.write_text(HEADER + _row(1, "Car", [(0.0, 37.98, 23.73, 36.0), (0.04, 37.98001, 23.73, 36.0),
                                           (0.08, 37.98002, 23.73, 36.0)]))
    (tr,) = parse_recording(p)
    assert tr.agent_id == "1" and tr.vehicle_type == "car"
    assert tr.samples.shape == (3, 4)
    # 36 km/h is 10 m/s
    np.testing.assert_allclose(tr.samples[:, 3], 10.0)


def test_parse_empty_file(tmp_path):
    p = tmp_path / "empty.csv"
    p.write_text("")
    assert parse_recording(p) == []


def test_parse_mixed_types(tmp_path):
    p = tmp_path / "rec.csv"
    p.write_text(HEADER
                 + _row(1, "Taxi", [(0.0, 37.98, 23.73, 0.0), (0.04, 37.98, 23.73, 0.0)])
                 + _row(2, "Motorcycle", [(0.0, 37.97, 23.72, 5.0), (0.04, 37.97, 23.72, 5.0),
                                          (0.08, 37.97, 23.72, 5.0), (0.12, 37.97, 23.72, 5.0)]))
    tracks = parse_recording(p)
    assert [t.vehicle_type for t in tracks] == ["taxi", "motorcycle"]
    assert [len(t.samples) for t in tracks] == [2, 4]


def test_parse_malformed_row_names_line(tmp_path):
    p = tmp_path / "rec.csv"
    p.write_text(HEADER + _row(1, "Car", [(0.0, 37.98, 23.73, 1.0)]) + "2; Car; 1; 1; 37.9; 23.7; x\n")
    with pytest.raises(ValueError, match="line 3"):
        parse_recording(p)


def test_raw_trajectory_validation():
    with pytest.raises(ValueError):
        RawTrajectory("a", "car", [[0, 0, 0, 1], [0, 1, 0, 1]])
    with pytest.raises(ValueError):
        RawTrajectory("a", "car", [[0, 0, 0, -1]])


def test_local_frame_origin_and_scale():
    origin = (37.98, 23.73)
    x, y = latlon_to_local(origin[0], origin[1], origin)
    assert x == 0.0 and y == 0.0
    x, y = latlon_to_local(origin[0] + math.degrees(1e-5), origin[1], origin)
    assert float(y) == pytest.approx(63.71, abs=1e-9)
    assert float(x) == pytest.approx(0.0, abs=1e-12)


def test_local_frame_round_trip():
    origin = (37.98, 23.73)
    lat = np.linspace(37.975, 37.985, 50)
    lon = np.linspace(23.72, 23.74, 50)
    LA, LO = np.meshgrid(lat, lon)
    x, y = latlon_to_local(LA, LO, origin)
    la2, lo2 = local_to_latlon(x, y, origin)
    x2, y2 = latlon_to_local(la2, lo2, origin)
    assert max(np.abs(x2 - x).max(), np.abs(y2 - y).max()) < 1e-6


def test_to_local_frame_keeps_time_and_speed():
    raw = RawTrajectory("1", "car", [[0.0, 37.98, 23.73, 2.0], [1.0, 37.981, 23.731, 3.0]])
    loc = to_local_frame(raw, (37.98, 23.73))
    assert loc.local
    np.testing.assert_array_equal(loc.samples[:, [0, 3]], raw.samples[:, [0, 3]])


def _local(samples, aid="1"):
    return RawTrajectory(aid, "car", np.asarray(samples, dtype=float), local=True)


def test_resample_subsamples_aligned_track():
    t = np.arange(0, 101) * 0.04
    raw = _local(np.column_stack([t, 3 * t, -t, np.full_like(t, 2.0)]))
    rec = resample(raw, 0.4)
    np.testing.assert_allclose(rec.positions, raw.samples[::10, 1:3], atol=1e-12)
    assert rec.start_step == 0 and rec.n_steps == 11


def test_resample_midpoint():
    rec = resample(_local([[0.0, 0.0, 0.0, 10.0], [0.8, 8.0, 0.0, 10.0]]), 0.4)
    np.testing.assert_allclose(rec.positions[1], [4.0, 0.0])


def test_resample_matches_dense_interpolation():
    rng = np.random.default_rng(0)
    t = np.cumsum(rng.uniform(0.01, 0.3, 60)) + 0.13
    xy = np.cumsum(rng.normal(0, 1, (60, 2)), axis=0)
    v = rng.uniform(0, 10, 60)
    rec = resample(_local(np.column_stack([t, xy, v])), 0.4)
    for k, tk in enumerate(rec.times()):
        np.testing.assert_allclose(rec.positions[k], oracles.piecewise_linear(t, xy, tk), atol=1e-9)
        assert rec.speeds[k] == pytest.approx(oracles.piecewise_linear(t, v, tk), abs=1e-9)


def test_resample_single_sample_dropped(caplog):
    with caplog.at_level(logging.WARNING):
        assert resample(_local([[0.0, 1.0, 1.0, 0.0]])) is None
    assert "single sample" in caplog.text


def test_resample_recomputes_missing_speed():
    t = np.arange(0, 11) * 0.4
    rec = resample(_local(np.column_stack([t, 5 * t, 0 * t, np.full_like(t, np.nan)])))
    np.testing.assert_allclose(rec.speeds, 5.0)


@given(st.lists(st.tuples(st.floats(0.01, 1.0), st.floats(-50, 50), st.floats(-50, 50)),
                min_size=2, max_size=30))
def test_resampled_points_stay_between_neighbours(steps):
    t = np.cumsum([s[0] for s in steps])
    xy = np.array([[s[1], s[2]] for s in steps])
    rec = resample(_local(np.column_stack([t, xy, np.ones(len(t))])), 0.4)
    if rec is None:
        return
    assert np.all(np.diff(rec.times()) > 0)
    np.testing.assert_allclose(np.diff(rec.times()), 0.4, atol=1e-9)
    for k, tk in enumerate(rec.times()):
        j = int(np.clip(np.searchsorted(t, tk, side="right") - 1, 0, len(t) - 2))
        lo = np.minimum(xy[j], xy[j + 1]) - 1e-9
        hi = np.maximum(xy[j], xy[j + 1]) + 1e-9
        assert np.all(rec.positions[k] >= lo) and np.all(rec.positions[k] <= hi)


def test_build_dataset_drops_short_tracks():
    t_long = np.arange(0, 30) * 0.4
    t_short = np.arange(0, 5) * 0.4
    ds = build_dataset([_local(np.column_stack([t_long, t_long, 0 * t_long, 1 + 0 * t_long]), "a"),
                        _local(np.column_stack([t_short, t_short, 0 * t_short, 1 + 0 * t_short]), "b")],
                       min_duration=5.0)
    assert [a.agent_id for a in ds.agents] == ["a"]
    assert ds.agents[0].entry_time < ds.agents[0].exit_time


def test_route_spacing():
    t = np.arange(0, 50) * 0.4
    ds = build_dataset([_local(np.column_stack([t, 10 * t, 0 * t, 10 + 0 * t]))], route_spacing=5.0)
    route = ds.agents[0].route
    seg = np.linalg.norm(np.diff(route, axis=0), axis=1)
    np.testing.assert_allclose(seg[:-1], 5.0, atol=1e-9)
    assert seg[-1] <= 5.0 + 1e-9


def test_normalized_round_trip(tmp_path):
    t = np.arange(0, 20) * 0.4
    tracks = [_local(np.column_stack([t, t * 2.5, t * 0.1, 2.5 + 0 * t]), "7")]
    p = tmp_path / "day1__a.csv"
    write_normalized(tracks, p)
    assert p.read_text().splitlines()[0] == "agent_id,type,time,x,y,speed"
    (back,) = read_normalized(p)
    np.testing.assert_array_equal(back.samples, tracks[0].samples)
    assert day_label(p) == "day1"
    ds = load_dataset(p)
    assert ds.label == "day1" and len(ds.agents) == 1


def test_normalized_malformed(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("agent_id,type,time,x,y,speed\n1,car,0.0,1.0,2.0,3.0\n1,car,oops,1,2,3\n")
    with pytest.raises(ValueError, match="line 3"):
        read_normalized(p)


def _day(label):
    t = np.arange(0, 20) * 0.4
    return build_dataset([_local(np.column_stack([t, t, 0 * t, 1 + 0 * t]))], label=label)


def test_split_by_day():
    days = [_day(d) for d in ("day1", "day2", "day3", "day4")]
    train, test = split_by_day(days)
    assert [d.label for d in train] == ["day1", "day2", "day3"]
    assert [d.label for d in test] == ["day4"]
    rng = np.random.default_rng(0)
    perm = [days[i] for i in rng.permutation(4)]
    train2, test2 = split_by_day(perm)
    assert [d.label for d in train2] == ["day1", "day2", "day3"] and test2[0].label == "day4"
    with pytest.raises(ValueError):
        split_by_day([days[0]])


def test_split_by_day_natural_order():
    train, test = split_by_day([_day("day10"), _day("day9"), _day("day2")])
    assert test[0].label == "day10"


def test_schedule_lookup_and_json(tmp_path):
    sch = SignalSchedule({"3": [(0.0, 30.0, RED), (30.0, 60.0, GREEN)]})
    assert sch.lookup(3, 0.0) == RED
    assert sch.lookup("3", 29.99) == RED
    assert sch.lookup(3, 30.0) == GREEN
    assert sch.lookup(3, 60.0) == GREEN
    assert sch.lookup(3, 61.0) == UNKNOWN
    assert sch.lookup(4, 10.0) == UNKNOWN
    p = tmp_path / "l.json"
    sch.save(p)
    assert SignalSchedule.load(p).intervals == sch.intervals
    assert sch.transitions(3) == [(30.0, RED, GREEN)]


# traffic-light estimation on hand-built kinematics

def _signal_net():
    return RoadNetwork([
        Road(0, [[0.0, 0.0], [300.0, 0.0]], 1, 3.5, True, (1,)),
        Road(1, [[300.0, 0.0], [600.0, 0.0]], 1, 3.5, False, ()),
        Road(2, [[0.0, 50.0], [300.0, 50.0]], 1, 3.5, True, ()),
    ])


def _track(aid, fn, t0, t1, dt=0.04):
    t = np.arange(int(round(t0 / dt)), int(round(t1 / dt)) + 1) * dt
    x, v = fn(t)
    return RawTrajectory(aid, "car", np.column_stack([t, x, np.zeros_like(t), v]), local=True)


def _queue_then_discharge():
    def stopped_then_go(x0, t_go):
        def f(t):
            tau = np.maximum(t - t_go, 0.0)
            return x0 + tau ** 2, 2.0 * tau
        return f

    def cruise(x0, t_in, v=10.0):
        def f(t):
            return x0 + v * (t - t_in), np.full_like(t, v)
        return f

    raws = [_track("a", stopped_then_go(295.0, 30.0), 0.0, 45.0),
            _track("b", stopped_then_go(287.0, 30.8), 0.0, 45.0),
            _track("z", lambda t: (np.full_like(t, 10.0), np.zeros_like(t)), 0.0, 59.6)]
    for k in range(6):
        t_in = 34.0 + 4.0 * k
        raws.append(_track(f"c{k}", cruise(150.0, t_in), t_in, min(t_in + 25.0, 59.6)))
    return build_dataset(raws, 0.4, 5.0, 0.0, "q")


def test_lights_queue_then_discharge():
    sch = estimate_traffic_lights(_queue_then_discharge(), _signal_net())
    ivs = sch.intervals["0"]
    assert [iv[2] for iv in ivs] == [RED, GREEN]
    assert ivs[0][0] == pytest.approx(0.0)
    assert abs(ivs[0][1] - 30.0) <= 0.4 + 1e-9
    assert ivs[1][1] == pytest.approx(60.0)
    # intervals partition the observed span
    assert ivs[0][1] == ivs[1][0]


def test_lights_free_flow_green_and_empty_unknown():
    raws = [_track(f"f{k}", lambda t, k=k: (10.0 * (t - 3.0 * k), np.full_like(t, 10.0)),
                   3.0 * k, 3.0 * k + 29.0) for k in range(10)]
    sch = estimate_traffic_lights(build_dataset(raws, 0.4, 5.0, 0.0), _signal_net())
    assert {iv[2] for iv in sch.intervals["0"]} == {GREEN}
    assert sch.intervals["2"] == [(sch.intervals["2"][0][0], sch.intervals["2"][0][1], UNKNOWN)]
    assert sch.lookup(2, 10.0) == UNKNOWN


def test_lights_need_signalized_road():
    net = RoadNetwork([Road(0, [[0.0, 0.0], [10.0, 0.0]])])
    with pytest.raises(ValueError):
        estimate_traffic_lights(_day("d"), net)
