"""Desk-scale 2D world: pipelines, vehicle kinematics, sonar oracle and the closed loop.

Randomness comes from numpy's PCG64 generator seeded from the scenario, so
identical scenarios yield byte-identical traces.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Sequence

import numpy as np
from shapely.geometry import Point, Polygon
from shapely.prepared import prep

from .bt_core import BehaviorTreeDef, Blackboard, NodeStatus, check_tree, tick
from .geo import BBox, GeoPoint, LocalFrame, SonarConfig, bbox_for_slant, heading_vector, wrap_angle
from .mission import (M_STATION, M_SURFACE, Command, DetectionEvent, MissionConfig, MissionError,
                      MissionState, SetWaypoint, StationKeep, Surface, TrackHeading, VehicleState,
                      abort, command_to_dict, detection_to_geo, initial_mission, parse_key_values,
                      plan_rows, step_mission)

SCENARIO_HEADER = "# btweave scenario v1"
SAMPLE_STEP = 0.25  # metres between pipeline samples
CORRIDOR = 1.0  # half-width of the along-track slice a ping insonifies
STATION_STOP_STEPS = 10


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class Pipeline:
    points: tuple[GeoPoint, ...]
    buried: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        if len(self.points) < 2:
            raise ScenarioError("a pipeline needs at least two points")
        total = self.length
        for lo, hi in self.buried:
            if not 0 <= lo <= hi <= total + 1e-9:
                raise ScenarioError(f"buried interval [{lo}, {hi}] outside [0, {total:.3f}]")

    @property
    def length(self) -> float:
        return sum(a.dist(b) for a, b in zip(self.points, self.points[1:]))

    def samples(self, step: float = SAMPLE_STEP) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(xy, arc length, buried mask) sampled every ``step`` metres."""
        xy, arc = [], []
        s0 = 0.0
        for a, b in zip(self.points, self.points[1:]):
            seg = a.dist(b)
            n = max(1, math.ceil(seg / step))
            t = np.arange(n) / n
            xy.append(np.column_stack([a.east + t * (b.east - a.east), a.north + t * (b.north - a.north)]))
            arc.append(s0 + t * seg)
            s0 += seg
        last = self.points[-1]
        xy.append(np.array([[last.east, last.north]]))
        arc.append(np.array([s0]))
        xy, arc = np.vstack(xy), np.concatenate(arc)
        buried = np.zeros(len(arc), dtype=bool)
        for lo, hi in self.buried:
            buried |= (arc >= lo) & (arc <= hi)
        return xy, arc, buried


@dataclass(frozen=True)
class Scenario:
    pipelines: tuple[Pipeline, ...]
    rows_region: tuple[float, float, float, float]
    initial: VehicleState
    rows_spacing: float = 40.0
    rows_orientation: float = 0.0
    zones: tuple[tuple[GeoPoint, ...], ...] = ()
    drain_rate: float = 0.0
    battery_threshold: float = 0.2
    sonar: SonarConfig = SonarConfig()
    false_negative: float = 0.1
    sigma: float = 0.5
    min_ground: float = 0.1  # nadir exclusion in ground range
    seed: int = 0
    max_turn_rate: float = 0.3
    ascent_rate: float = 0.5
    origin: tuple[float, float] = (41.18, -8.70)
    mission: MissionConfig = MissionConfig()
    dt: float = 0.5
    max_time: float = 1500.0

    def __post_init__(self):
        if self.drain_rate < 0:
            raise ScenarioError("battery drain rate must be >= 0")
        if not 0 <= self.false_negative <= 1 or self.sigma < 0:
            raise ScenarioError("invalid detection model parameters")
        for zone in self.zones:
            if len(zone) < 3:
                raise ScenarioError("a restricted zone needs at least three points")

    @property
    def frame(self) -> LocalFrame:
        return LocalFrame(*self.origin)


# -- scenario files ---------------------------------------------------------

_SCALARS = {
    "rows_spacing": float, "rows_orientation_deg": float, "drain_rate": float,
    "battery_threshold": float, "false_negative": float, "sigma": float, "min_ground": float,
    "seed": int, "max_turn_rate": float, "ascent_rate": float, "dt": float, "max_time": float,
    "max_range": float, "resolution": float, "lag": float,
}
_VEHICLE = {"start_heading_deg", "altitude", "depth", "battery", "speed"}


def _points(text: str) -> tuple[GeoPoint, ...]:
    pts = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if chunk:
            e, n = (float(v) for v in chunk.split(","))
            pts.append(GeoPoint(e, n))
    return tuple(pts)


def parse_scenario(text: str, mission_defaults: MissionConfig | None = None) -> Scenario:
    """Parse the ``key = value`` scenario format.

    Repeated ``pipeline`` keys add polylines (``e,n; e,n; ...``), ``buried``
    takes ``index start end`` and ``zone`` a polygon. Mission config keys are
    accepted too.
    """
    lines = text.splitlines()
    if not lines or lines[0].strip() != SCENARIO_HEADER:
        raise ScenarioError(f"missing header {SCENARIO_HEADER!r}")
    pipes: list[list] = []
    zones, scalars, vehicle, mission = [], {}, {}, {}
    region = start = origin = None
    try:
        for key, value, lineno in parse_key_values(text):
            if key == "pipeline":
                pipes.append([_points(value), []])
            elif key == "buried":
                idx, lo, hi = value.split()
                pipes[int(idx)][1].append((float(lo), float(hi)))
            elif key == "zone":
                zones.append(_points(value))
            elif key == "rows_region":
                region = tuple(float(v) for v in value.split(","))
            elif key == "start":
                start = _points(value)[0]
            elif key == "origin":
                origin = tuple(float(v) for v in value.split(","))
            elif key in _SCALARS:
                scalars[key] = _SCALARS[key](value)
            elif key in _VEHICLE:
                vehicle[key] = float(value)
            elif key in MissionConfig.__dataclass_fields__:
                mission[key] = value
            else:
                raise ScenarioError(f"line {lineno}: unknown key {key!r}")
    except (ValueError, IndexError) as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(f"malformed scenario: {exc}") from exc
    if region is None or len(region) != 4:
        raise ScenarioError("rows_region = e_min, n_min, e_max, n_max is required")
    if not pipes:
        raise ScenarioError("at least one pipeline is required")
    sonar = SonarConfig(scalars.pop("max_range", 30.0), scalars.pop("resolution", 0.05), scalars.pop("lag", 2.0))
    heading = math.radians(vehicle.pop("start_heading_deg", 0.0))
    start = start or GeoPoint(region[0], region[1])
    init = VehicleState(start, heading, vehicle.get("speed", 0.0), vehicle.get("altitude", 3.0),
                        vehicle.get("depth", 10.0), vehicle.get("battery", 1.0))
    orientation = math.radians(scalars.pop("rows_orientation_deg", 0.0))
    try:
        cfg = MissionConfig.from_mapping(mission, mission_defaults)
    except MissionError as exc:
        raise ScenarioError(str(exc)) from exc
    kwargs: dict[str, Any] = dict(scalars)
    if origin is not None:
        kwargs["origin"] = origin
    return Scenario(pipelines=tuple(Pipeline(p, tuple(b)) for p, b in pipes), rows_region=region,
                    initial=init, rows_orientation=orientation, zones=tuple(zones), sonar=sonar,
                    mission=cfg, **kwargs)


def load_scenario(path: str, mission_defaults: MissionConfig | None = None) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        return parse_scenario(fh.read(), mission_defaults)


def builtin_scenario_text(name: str = "gap_crossing") -> str:
    from .bt_dsl import load_resource
    return load_resource(f"{name}.scenario")


def builtin_scenario(name: str = "gap_crossing", **overrides) -> Scenario:
    sc = parse_scenario(builtin_scenario_text(name))
    return replace(sc, **overrides) if overrides else sc


# -- kinematics -------------------------------------------------------------


def step_vehicle(state: VehicleState, cmd: Command, dt: float, max_turn_rate: float = 0.3,
                 ascent_rate: float = 0.5) -> VehicleState:
    """Unicycle: slew heading at a bounded rate, then advance speed * dt."""
    t = state.t + dt
    if isinstance(cmd, StationKeep):
        if state.position.dist(cmd.anchor) <= 1.0:
            return replace(state, speed=0.0, t=t)
        cmd = SetWaypoint(cmd.anchor, min(1.0, state.position.dist(cmd.anchor) / dt))
    if isinstance(cmd, Surface):
        return replace(state, speed=0.0, depth=max(0.0, state.depth - ascent_rate * dt), t=t)
    if isinstance(cmd, SetWaypoint):
        desired = math.atan2(cmd.target.east - state.position.east, cmd.target.north - state.position.north)
    else:
        desired = cmd.heading
    turn = wrap_angle(desired - state.heading)
    limit = max_turn_rate * dt
    heading = wrap_angle(state.heading + max(-limit, min(limit, turn)))
    de, dn = heading_vector(heading)
    step = cmd.speed * dt
    pos = GeoPoint(state.position.east + step * de, state.position.north + step * dn)
    return replace(state, position=pos, heading=heading, speed=cmd.speed, t=t)


# -- sonar oracle -----------------------------------------------------------


class _World:
    """Pre-sampled pipelines and prepared zone polygons for a scenario."""

    def __init__(self, scenario: Scenario):
        xy, buried = [], []
        for pipe in scenario.pipelines:
            p, _, b = pipe.samples()
            xy.append(p)
            buried.append(b)
        self.xy = np.vstack(xy)
        self.buried = np.concatenate(buried)
        self.visible = self.xy[~self.buried]
        self.zones = [prep(Polygon(z)) for z in scenario.zones]

    def in_zone(self, p: GeoPoint) -> bool:
        pt = Point(p.east, p.north)
        return any(z.covers(pt) for z in self.zones)


_WORLDS: dict[int, tuple[Scenario, _World]] = {}


def _world(scenario: Scenario) -> _World:
    key = id(scenario)
    hit = _WORLDS.get(key)
    if hit is None or hit[0] is not scenario:
        _WORLDS.clear()
        hit = _WORLDS[key] = (scenario, _World(scenario))
    return hit[1]


def sonar_detect(state: VehicleState, scenario: Scenario, rng: np.random.Generator) -> DetectionEvent | None:
    """Detection produced by a ping at ``state`` (the vehicle at insonification).

    The nearest visible pipeline sample inside the ping's across-track slice is
    reported with across-track noise; the caller delivers it ``lag`` later.
    """
    world = _world(scenario)
    pts = world.visible
    if len(pts) == 0:
        return None
    ue, un = heading_vector(state.heading)
    d = pts - np.array([state.position.east, state.position.north])
    along = d[:, 0] * ue + d[:, 1] * un
    across = d[:, 0] * un - d[:, 1] * ue  # positive to starboard
    alt = state.altitude
    max_ground = math.sqrt(max(scenario.sonar.max_range ** 2 - alt * alt, 0.0))
    ok = (np.abs(along) <= CORRIDOR) & (np.abs(across) >= scenario.min_ground) & (np.abs(across) <= max_ground)
    if not ok.any():
        return None
    idx = np.flatnonzero(ok)
    best = idx[np.argmin(np.hypot(along[idx], across[idx]))]
    if rng.random() < scenario.false_negative:
        return None
    noisy = float(across[best] + rng.normal(0.0, scenario.sigma))
    ground = max(abs(noisy), 1e-3)
    slant = min(math.sqrt(ground * ground + alt * alt), scenario.sonar.max_range)
    side = "starboard" if noisy >= 0 else "port"
    bbox = bbox_for_slant(slant, side, scenario.sonar)
    source = GeoPoint(float(pts[best, 0]), float(pts[best, 1]))
    det = DetectionEvent(state.t, bbox, slant, side, 0.9, None, source)
    return replace(det, geo=detection_to_geo(bbox, scenario.sonar, state))


# -- closed loop ------------------------------------------------------------


@dataclass
class Trace:
    header: dict
    records: list[dict] = field(default_factory=list)

    def to_jsonl(self) -> str:
        lines = [json.dumps(self.header, sort_keys=True)]
        lines += [json.dumps(r, sort_keys=True) for r in self.records]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "Trace":
        rows = [json.loads(line) for line in text.splitlines() if line.strip()]
        if not rows or rows[0].get("kind") != "header":
            raise ScenarioError("trace has no header record")
        return cls(rows[0], rows[1:])

    def phases(self) -> list[str]:
        return [r["phase"] for r in self.records]


def _vehicle_dict(v: VehicleState) -> dict:
    return {"east": v.position.east, "north": v.position.north, "heading": v.heading, "speed": v.speed,
            "altitude": v.altitude, "depth": v.depth, "battery": v.battery}


def _detection_dict(det: DetectionEvent) -> dict:
    return {"t_ping": det.t_ping, "slant": det.slant, "side": det.side, "confidence": det.confidence,
            "bbox": [det.bbox.x, det.bbox.y, det.bbox.w, det.bbox.h],
            "geo": [det.geo.east, det.geo.north], "source": [det.source.east, det.source.north]}


def trace_header(scenario: Scenario, bt: BehaviorTreeDef, dt: float) -> dict:
    return {"kind": "header", "tree": bt.name, "dt": dt, "seed": scenario.seed, "origin": list(scenario.origin),
            "sigma": scenario.sigma, "capture_radius": scenario.mission.capture_radius,
            "schema": list(bt.schema), "tasks": bt.tasks(),
            "pipelines": [{"points": [list(p) for p in pipe.points], "buried": [list(b) for b in pipe.buried]}
                          for pipe in scenario.pipelines],
            "zones": [[list(p) for p in z] for z in scenario.zones]}


class _Loop:
    """Mutable per-step context shared by the action handlers."""

    def __init__(self, ms: MissionState):
        self.ms = ms
        self.vehicle: VehicleState | None = None
        self.planned: Command | None = None
        self.issued: Command | None = None

    def _issue(self, cmd: Command) -> None:
        if self.issued is None:
            self.issued = cmd

    def mission_task(self, bb) -> NodeStatus:
        self._issue(self.planned)
        return NodeStatus.RUNNING

    def subscription(self, bb) -> NodeStatus:
        return NodeStatus.SUCCESS

    def surface(self, bb) -> NodeStatus:
        v = self.vehicle
        if v.depth > self.ms.config.surface_depth:
            self.ms = abort(self.ms, v)
            self._issue(Surface())
            return NodeStatus.RUNNING
        return NodeStatus.SUCCESS

    def station_keep(self, bb) -> NodeStatus:
        v = self.vehicle
        if v.depth <= self.ms.config.surface_depth:
            self.ms = abort(self.ms, v)
            self.issued = StationKeep(self.ms.station_anchor)
        return NodeStatus.RUNNING

    def handlers(self) -> dict:
        return {
            "DetectionSubTask": self.subscription, "BatterySubTask": self.subscription,
            "NavigationSubTask": self.subscription, "StorePositionTask": self.subscription,
            "RowsTask": self.mission_task, "GotoTask": self.mission_task, "TrackingTask": self.mission_task,
            "SurfaceTask": self.surface, "stationKeepingTask": self.station_keep,
        }


def simulate(scenario: Scenario, bt: BehaviorTreeDef, max_time: float | None = None,
             dt: float | None = None) -> Trace:
    check_tree(bt)
    max_time = scenario.max_time if max_time is None else max_time
    dt = scenario.dt if dt is None else dt
    if max_time <= 0 or dt <= 0:
        raise ScenarioError("max_time and dt must be positive")
    rng = np.random.Generator(np.random.PCG64(scenario.seed))
    world = _world(scenario)
    rows = plan_rows(scenario.rows_region, scenario.rows_spacing, scenario.rows_orientation)
    loop = _Loop(initial_mission(scenario.mission, rows))
    handlers = loop.handlers()
    bb = Blackboard(bt.schema)
    lag_steps = int(round(scenario.sonar.lag / dt))
    history: list[VehicleState] = []
    vehicle = replace(scenario.initial, t=0.0)
    trace = Trace(trace_header(scenario, bt, dt))
    n_steps = int(math.floor(max_time / dt + 1e-9))
    station_run = 0
    for k in range(n_steps):
        t = k * dt
        vehicle = replace(vehicle, t=t)
        history.append(vehicle)
        # (1) sonar: the ping from lag seconds ago becomes available now
        det = None
        if k >= lag_steps:
            det = sonar_detect(history[k - lag_steps], scenario, rng)
        ms = loop.ms
        if ms.phase in (M_SURFACE, M_STATION) or ms.coverage_plan is not None or ms.tracking_complete:
            det = None  # detections are not consumed once the inspection is over
        # (2) controller update and blackboard
        ms, planned = step_mission(ms, vehicle, det, dt)
        loop.ms, loop.vehicle, loop.planned, loop.issued = ms, vehicle, planned, None
        values = {
            "batteryLow": int(vehicle.battery < scenario.battery_threshold),
            "restrictedZone": int(world.in_zone(vehicle.position)),
            "pipeLost": ms.pipe_lost,
            "status": ms.phase,
            "trackingDone": int(ms.tracking_complete),
            "coverageDone": int(ms.coverage_done),
        }
        for name, value in values.items():
            if name in bb.schema:
                bb.set(name, value)
        # (3) tick; handlers may switch the controller into surface/station
        result = tick(bt, bb, handlers)
        if "status" in bb.schema:
            bb.set("status", loop.ms.phase)
        cmd = loop.issued if loop.issued is not None else planned
        record = {
            "t": t, "vehicle": _vehicle_dict(vehicle), "phase": loop.ms.phase, "command": command_to_dict(cmd),
            "detection": _detection_dict(det) if det is not None else None, "blackboard": bb.snapshot(),
            "root": result.status.value, "active": sorted(result.active_tasks),
            "stored": list(loop.ms.stored) if loop.ms.stored is not None else None,
        }
        trace.records.append(record)
        # (4) kinematics and battery
        vehicle = step_vehicle(vehicle, cmd, dt, scenario.max_turn_rate, scenario.ascent_rate)
        vehicle = replace(vehicle, battery=max(0.0, vehicle.battery - scenario.drain_rate * dt))
        station_run = station_run + 1 if loop.ms.phase == M_STATION else 0
        if station_run >= STATION_STOP_STEPS:
            break
    return trace


# -- analysis ---------------------------------------------------------------


def project_state(record: dict, ts) -> tuple:
    """Trace record as a state of the translated transition system."""
    values = dict(record["blackboard"])
    active = set(record["active"])
    for task in ts.tasks:
        values[f"{task}.active"] = int(task in active)
    return ts.state_of(values)


def trace_edges_ok(trace: Trace, ts) -> tuple[bool, int | None]:
    """Whether every consecutive projected pair is an edge; else the first bad index."""
    states = [project_state(r, ts) for r in trace.records]
    for i, (a, b) in enumerate(zip(states, states[1:])):
        if not ts.has_edge(a, b):
            return False, i
    return True, None


def stored_points(trace: Trace) -> list[GeoPoint]:
    return [GeoPoint(*r["stored"]) for r in trace.records if r["stored"] is not None]


def _visible_arc(pipelines: Sequence[Pipeline]) -> np.ndarray:
    pts = []
    for pipe in pipelines:
        xy, _, buried = pipe.samples()
        pts.append(xy[~buried])
    return np.vstack(pts) if pts else np.empty((0, 2))


def _min_dist(points: np.ndarray, refs: np.ndarray) -> np.ndarray:
    best = np.full(len(points), np.inf)
    for chunk in np.array_split(refs, max(1, len(refs) // 256)):
        d = np.hypot(points[:, None, 0] - chunk[None, :, 0], points[:, None, 1] - chunk[None, :, 1])
        best = np.minimum(best, d.min(axis=1))
    return best


def coverage_metrics(trace: Trace, scenario: Scenario) -> dict:
    if not trace.records:
        raise ScenarioError("empty trace")
    stored = np.array(stored_points(trace)).reshape(-1, 2)
    visible = _visible_arc(scenario.pipelines)
    if len(stored) and len(visible):
        covered = _min_dist(visible, stored) <= 3 * scenario.sigma + 2.0
        detect_coverage = float(covered.mean())
    else:
        detect_coverage = 0.0
    all_pipe = np.vstack([p.samples()[0] for p in scenario.pipelines])
    tracking = np.array([[r["vehicle"]["east"], r["vehicle"]["north"]]
                         for r in trace.records if r["phase"] == "m_tracking"]).reshape(-1, 2)
    track_error_rms = None
    if len(tracking):
        track_error_rms = float(np.sqrt(np.mean(_min_dist(tracking, all_pipe) ** 2)))
    coverage_done = any(r["blackboard"].get("coverageDone") == 1 for r in trace.records)
    coverage_pos = np.array([[r["vehicle"]["east"], r["vehicle"]["north"]] for r in trace.records
                             if r["blackboard"].get("trackingDone") == 1 and r["phase"] in ("m_steering", "m_surface")
                             and r["command"]["purpose"] != "last_known"]).reshape(-1, 2)
    visited = bool(len(stored)) and bool(len(coverage_pos)) and \
        bool((_min_dist(stored, coverage_pos) <= scenario.mission.capture_radius + 1e-9).all())
    battery_abort = any(r["blackboard"].get("batteryLow") == 1 for r in trace.records)
    return {
        "detect_coverage": detect_coverage,
        "track_error_rms": track_error_rms,
        "mission_complete": bool(coverage_done and visited and not battery_abort),
        "stored_points": int(len(stored)),
        "steps": len(trace.records),
    }


def phase_runs(phases: Iterable[str]) -> list[str]:
    """Phases with consecutive repeats collapsed."""
    out: list[str] = []
    for p in phases:
        if not out or out[-1] != p:
            out.append(p)
    return out
