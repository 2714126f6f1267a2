import math
from dataclasses import replace

import numpy as np
import pytest

from btweave.bt_dsl import builtin_inspection_tree
from btweave.formal_model import permissive_env, translate
from btweave.geo import GeoPoint, SonarConfig
from btweave.mission import (M_STATION, MISSION_PURPOSES, SetWaypoint, StationKeep, Surface, TrackHeading,
                             VehicleState)
from btweave.world_sim import (Pipeline, Scenario, ScenarioError, Trace, builtin_scenario, coverage_metrics,
                               parse_scenario, phase_runs, simulate, sonar_detect, step_vehicle, stored_points,
                               trace_edges_ok)

from helpers import battery_scenario

BT = builtin_inspection_tree()


def straight_scenario(**kw):
    base = builtin_scenario()
    pipe = Pipeline((GeoPoint(0, 0), GeoPoint(0, 100)))
    return replace(base, pipelines=(pipe,), rows_region=(-20, -20, 60, 120), **kw)


def rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


# -- kinematics ---------------------------------------------------------------


def test_straight_line_step():
    s = step_vehicle(VehicleState(GeoPoint(0, 0)), TrackHeading(0.0, 1.0), 1.0)
    assert s.position.east == pytest.approx(0.0) and s.position.north == pytest.approx(1.0)
    assert s.t == 1.0


def test_turn_rate_saturates():
    s = step_vehicle(VehicleState(GeoPoint(0, 0)), TrackHeading(math.pi - 1e-9, 1.0), 1.0, max_turn_rate=0.3)
    assert s.heading == pytest.approx(0.3)


def test_station_keep_holds_position():
    anchor = GeoPoint(10, 10)
    s = VehicleState(GeoPoint(10.5, 10), heading=1.0, speed=1.5)
    for _ in range(100):
        s = step_vehicle(s, StationKeep(anchor), 0.5)
        assert s.position.dist(anchor) < 1.0
    drifted = step_vehicle(VehicleState(GeoPoint(15, 10), heading=-math.pi / 2), StationKeep(anchor), 0.5)
    assert drifted.position.dist(anchor) < 5.0


def test_surface_ascends():
    s = VehicleState(GeoPoint(0, 0), depth=1.0, speed=1.0)
    s = step_vehicle(s, Surface(), 1.0, ascent_rate=0.5)
    assert (s.depth, s.speed, s.position) == (0.5, 0.0, GeoPoint(0, 0))
    s = step_vehicle(step_vehicle(s, Surface(), 1.0), Surface(), 1.0)
    assert s.depth == 0.0


def test_waypoint_heads_to_target():
    s = step_vehicle(VehicleState(GeoPoint(0, 0), heading=math.pi / 2), SetWaypoint(GeoPoint(10, 0), 1.0), 1.0)
    assert s.position.east == pytest.approx(1.0)


# -- sonar -------------------------------------------------------------------


def test_sonar_pythagoras():
    sc = straight_scenario(sigma=0.0, false_negative=0.0)
    det = sonar_detect(VehicleState(GeoPoint(-4, 50), heading=0.0, altitude=3.0), sc, rng())
    assert det is not None and det.side == "starboard"
    assert det.slant == pytest.approx(5.0)
    assert det.geo.east == pytest.approx(0.0, abs=1e-9) and det.geo.north == pytest.approx(50.0)
    noisy = straight_scenario(sigma=0.5, false_negative=0.0)
    slants = [sonar_detect(VehicleState(GeoPoint(-4, 50), altitude=3.0), noisy, rng(k)).slant for k in range(200)]
    assert abs(np.mean(slants) - 5.0) < 0.1


def test_sonar_buried_and_false_negative():
    sc = builtin_scenario(false_negative=0.0)
    over_gap = VehicleState(GeoPoint(-4, 115), altitude=3.0)
    assert all(sonar_detect(over_gap, sc, rng(k)) is None for k in range(50))
    blind = builtin_scenario(false_negative=1.0)
    assert all(sonar_detect(VehicleState(GeoPoint(-4, 50)), blind, rng(k)) is None for k in range(50))


def test_sonar_out_of_range():
    sc = straight_scenario(false_negative=0.0)
    assert sonar_detect(VehicleState(GeoPoint(-40, 50), altitude=3.0), sc, rng()) is None


# -- closed loop ---------------------------------------------------------------


def test_tiny_max_time_gives_empty_trace():
    tr = simulate(builtin_scenario(), BT, max_time=0.1, dt=1.0)
    assert tr.records == []
    with pytest.raises(ScenarioError):
        simulate(builtin_scenario(), BT, max_time=0.0)


def test_determinism():
    a = simulate(builtin_scenario(), BT).to_jsonl()
    b = simulate(builtin_scenario(), BT).to_jsonl()
    assert a == b
    assert simulate(builtin_scenario(seed=8), BT).to_jsonl() != a


def test_trace_structure_and_roundtrip():
    sc = builtin_scenario()
    tr = simulate(sc, BT, max_time=200)
    ts = [r["t"] for r in tr.records]
    assert all(b - a == pytest.approx(sc.dt) for a, b in zip(ts, ts[1:]))
    back = Trace.from_jsonl(tr.to_jsonl())
    assert back.records == tr.records and back.header == tr.header


def test_no_teleport_and_valid_detections():
    sc = builtin_scenario()
    tr = simulate(sc, BT)
    vmax = sc.mission.speed
    pos = [(r["vehicle"]["east"], r["vehicle"]["north"]) for r in tr.records]
    for (e0, n0), (e1, n1) in zip(pos, pos[1:]):
        assert math.hypot(e1 - e0, n1 - n0) <= vmax * sc.dt + 1e-9
    by_t = {r["t"]: r for r in tr.records}
    pipe = sc.pipelines[0]
    n_det = 0
    for r in tr.records:
        det = r["detection"]
        if det is None:
            continue
        n_det += 1
        ping = by_t[det["t_ping"]]["vehicle"]
        src = GeoPoint(*det["source"])
        ground = math.hypot(src.east - ping["east"], src.north - ping["north"])
        assert math.hypot(ground, ping["altitude"]) <= sc.sonar.max_range + 1e-9
        # the source is on the pipe and outside the buried stretch
        assert abs(src.east) < 1e-9 and not (100 <= src.north <= 130)
        assert det["t_ping"] == pytest.approx(r["t"] - sc.sonar.lag)
    assert n_det > 50
    assert pipe.length == 230


def test_gap_crossing_phase_cycle():
    tr = simulate(builtin_scenario(), BT)
    runs = phase_runs(tr.phases())
    assert runs[:6] == ["m_search", "m_steering", "m_tracking", "m_search", "m_steering", "m_tracking"]
    assert runs[-2:] == ["m_surface", "m_station"]


def test_noiseless_straight_pipe_coverage():
    sc = straight_scenario(sigma=0.0, false_negative=0.0)
    m = coverage_metrics(simulate(sc, BT), sc)
    assert m["detect_coverage"] >= 0.95 and m["mission_complete"]


def test_metrics_without_tracking():
    sc = builtin_scenario()
    m = coverage_metrics(simulate(sc, BT, max_time=5), sc)
    assert m["track_error_rms"] is None and m["detect_coverage"] == 0.0
    with pytest.raises(ScenarioError):
        coverage_metrics(Trace({}, []), sc)


def test_battery_abort_is_not_complete():
    sc = battery_scenario(3)
    tr = simulate(sc, BT)
    assert coverage_metrics(tr, sc)["mission_complete"] is False
    assert tr.records[-1]["phase"] == M_STATION


def test_restricted_zone_triggers_failsafe():
    sc = builtin_scenario(zones=((GeoPoint(-30, 40), GeoPoint(70, 40), GeoPoint(70, 60), GeoPoint(-30, 60)),))
    tr = simulate(sc, BT)
    first = next(i for i, r in enumerate(tr.records) if r["blackboard"]["restrictedZone"] == 1)
    assert all(r["command"]["purpose"] not in MISSION_PURPOSES for r in tr.records[first:])
    assert tr.records[-1]["phase"] == M_STATION


def test_trace_is_a_model_path():
    tr = simulate(builtin_scenario(), BT)
    ok, bad = trace_edges_ok(tr, translate(BT, permissive_env(BT)))
    assert ok, bad


def test_stored_points_feed_map():
    tr = simulate(builtin_scenario(), BT)
    pts = stored_points(tr)
    assert len(pts) == coverage_metrics(tr, builtin_scenario())["stored_points"] > 0
    assert all(r["phase"] == "m_tracking" for r in tr.records if r["stored"] is not None)


def test_scenario_parsing():
    sc = parse_scenario("# btweave scenario v1\npipeline = 0,0; 0,50\nburied = 0 10 20\n"
                        "rows_region = -10,-10,10,60\nstart = 1, 2\nseed = 5\nt_lost = 3\nmax_range = 20\n")
    assert sc.pipelines[0].buried == ((10.0, 20.0),)
    assert sc.initial.position == GeoPoint(1, 2) and sc.seed == 5
    assert sc.mission.t_lost == 3.0 and sc.sonar == SonarConfig(20.0, 0.05, 2.0)
    for bad in ["pipeline = 0,0; 0,1\nrows_region = 0,0,1,1\n",  # no header
                "# btweave scenario v1\nrows_region = 0,0,1,1\n",  # no pipeline
                "# btweave scenario v1\npipeline = 0,0; 0,1\nburied = 0 0 5\nrows_region = 0,0,1,1\n",
                "# btweave scenario v1\npipeline = 0,0; 0,1\nrows_region = 0,0,1,1\nwarp = 9\n"]:
        with pytest.raises(ScenarioError):
            parse_scenario(bad)


def test_scenario_invariants():
    with pytest.raises(ScenarioError):
        Pipeline((GeoPoint(0, 0),))
    with pytest.raises(ScenarioError):
        replace(builtin_scenario(), drain_rate=-1.0)
    assert isinstance(builtin_scenario(), Scenario)
