"""Pipeline-inspection controller: Rows / GoTo / Tracking maneuvers.

:func:`step_mission` is a pure transition function over :class:`MissionState`.
It starts with a lawnmower survey, steers to the first sighting, tracks the
pipeline along the line through recent sightings, falls back to a local
search when the pipeline is lost, and after the search timer expires goes
to the last known position and replays every stored position before
surfacing.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, fields, replace
from typing import Mapping, Sequence, Union

from .geo import (BBox, GeoPoint, GeometryError, SonarConfig, bearing, georeference, heading_vector)

M_SEARCH = "m_search"
M_TRACKING = "m_tracking"
M_STEERING = "m_steering"
M_STATION = "m_station"
M_SURFACE = "m_surface"
PHASES = (M_SEARCH, M_TRACKING, M_STEERING, M_STATION, M_SURFACE)

# allowed phase changes (self-loops are always allowed)
PHASE_EDGES = frozenset({
    (M_SEARCH, M_STEERING), (M_STEERING, M_TRACKING), (M_TRACKING, M_SEARCH),
    (M_STEERING, M_SURFACE), (M_SURFACE, M_STATION),
})

# command purposes that belong to the inspection itself (not the failsafe)
MISSION_PURPOSES = frozenset({"rows", "search", "approach", "last_known", "coverage", "tracking"})


class MissionError(ValueError):
    pass


@dataclass(frozen=True)
class VehicleState:
    position: GeoPoint
    heading: float = 0.0  # rad, 0 = north, clockwise
    speed: float = 0.0
    altitude: float = 3.0
    depth: float = 10.0
    battery: float = 1.0
    t: float = 0.0

    def __post_init__(self):
        if self.speed < 0 or self.altitude < 0 or not 0.0 <= self.battery <= 1.0:
            raise MissionError(f"invalid vehicle state {self}")


@dataclass(frozen=True)
class DetectionEvent:
    t_ping: float
    bbox: BBox
    slant: float
    side: str  # "port" | "starboard"
    confidence: float = 1.0
    geo: GeoPoint | None = None
    source: GeoPoint | None = None  # true pipeline point (simulation only)

    def __post_init__(self):
        if self.slant <= 0 or not 0.0 <= self.confidence <= 1.0:
            raise MissionError(f"invalid detection {self}")


# -- commands -----------------------------------------------------------


@dataclass(frozen=True)
class SetWaypoint:
    target: GeoPoint
    speed: float
    purpose: str = "goto"
    kind = "SetWaypoint"


@dataclass(frozen=True)
class TrackHeading:
    heading: float
    speed: float
    purpose: str = "tracking"
    kind = "TrackHeading"


@dataclass(frozen=True)
class Surface:
    purpose: str = "surface"
    kind = "Surface"


@dataclass(frozen=True)
class StationKeep:
    anchor: GeoPoint
    purpose: str = "station"
    kind = "StationKeep"


Command = Union[SetWaypoint, TrackHeading, Surface, StationKeep]


def command_to_dict(cmd: Command) -> dict:
    out = {"kind": cmd.kind, "purpose": cmd.purpose}
    if isinstance(cmd, SetWaypoint):
        out.update(east=cmd.target.east, north=cmd.target.north, speed=cmd.speed)
    elif isinstance(cmd, TrackHeading):
        out.update(heading=cmd.heading, speed=cmd.speed)
    elif isinstance(cmd, StationKeep):
        out.update(east=cmd.anchor.east, north=cmd.anchor.north)
    return out


# -- configuration ------------------------------------------------------


@dataclass(frozen=True)
class MissionConfig:
    t_lost: float = 30.0
    t_search: float = 300.0
    capture_radius: float = 5.0
    lookahead: float = 10.0
    speed: float = 1.5
    track_offset: float = 1.0  # keep the pipe off nadir while tracking
    line_baseline: float = 10.0  # min extent of sightings before a fitted line is trusted
    line_window: float = 20.0  # sightings this close to the newest one enter the line fit
    revisit_radius: float = 5.0  # sightings this close to stored points are not new
    search_length: float = 80.0
    search_width: float = 80.0
    search_spacing: float = 20.0
    dedup_radius: float = 0.5
    surface_depth: float = 0.1

    @classmethod
    def from_mapping(cls, values: Mapping[str, str], base: "MissionConfig | None" = None) -> "MissionConfig":
        base = base or cls()
        known = {f.name for f in fields(cls)}
        updates = {}
        for key, raw in values.items():
            if key not in known:
                raise MissionError(f"unknown mission config key {key!r}")
            updates[key] = float(raw)
        return replace(base, **updates)


def parse_key_values(text: str) -> list[tuple[str, str, int]]:
    """``key = value`` lines with ``#`` comments; returns (key, value, line)."""
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise MissionError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out.append((key.strip(), value.strip(), lineno))
    return out


def parse_mission_config(text: str, base: MissionConfig | None = None) -> MissionConfig:
    return MissionConfig.from_mapping({k: v for k, v, _ in parse_key_values(text)}, base)


# -- geometry ops -------------------------------------------------------


def detection_to_geo(bbox: BBox, cfg: SonarConfig, state_at_ping: VehicleState) -> GeoPoint:
    return georeference(bbox, cfg, state_at_ping.position, state_at_ping.heading, state_at_ping.altitude)


def pursuit_target(p1: GeoPoint, p2: GeoPoint, position: GeoPoint, lookahead: float) -> GeoPoint:
    """Point ``lookahead`` metres ahead on the line p1->p2, never behind p2."""
    length = p1.dist(p2)
    if length == 0:
        raise GeometryError("degenerate line: p1 == p2")
    ue, un = (p2.east - p1.east) / length, (p2.north - p1.north) / length
    along = (position.east - p1.east) * ue + (position.north - p1.north) * un
    s = max(along, length) + lookahead
    return GeoPoint(p1.east + s * ue, p1.north + s * un)


def projected_line_guidance(p1: GeoPoint, p2: GeoPoint, vehicle: VehicleState, lookahead: float,
                            speed: float = 1.5) -> TrackHeading:
    """Pure pursuit on the infinite line through two sightings (p2 the newer)."""
    target = pursuit_target(p1, p2, vehicle.position, lookahead)
    return TrackHeading(bearing(vehicle.position, target), speed)


def plan_rows(region: tuple[float, float, float, float], spacing: float,
              orientation: float = 0.0) -> list[GeoPoint]:
    """Boustrophedon waypoints over ``region = (east_min, north_min, east_max, north_max)``.

    Legs run along ``orientation`` and are ``spacing`` apart across it;
    consecutive legs alternate direction.
    """
    e0, n0, e1, n1 = region
    if spacing <= 0:
        raise MissionError("row spacing must be positive")
    if e1 <= e0 or n1 <= n0:
        raise MissionError(f"degenerate region {region}")
    ue, un = heading_vector(orientation)  # along the legs
    ne, nn = un, -ue  # across, to the right of the legs
    corners = [(e0, n0), (e1, n0), (e1, n1), (e0, n1)]
    across = [e * ne + n * nn for e, n in corners]
    lo, hi = min(across), max(across)
    width = hi - lo
    if spacing > width:
        warnings.warn(f"row spacing {spacing} m exceeds region width {width:.1f} m; single leg", stacklevel=2)
        offsets = [(lo + hi) / 2]
    else:
        count = math.ceil(width / spacing - 1e-9) + 1
        offsets = [min(lo + k * spacing, hi) for k in range(count)]
    waypoints: list[GeoPoint] = []
    for k, c in enumerate(offsets):
        seg = _clip_line_to_box(c, (ne, nn), (ue, un), region)
        if seg is None:
            continue
        a, b = seg
        if a.dist(b) < 1e-9 and len(offsets) > 1:
            continue  # a corner touched by the sweep
        waypoints.extend([a, b] if k % 2 == 0 else [b, a])
    return waypoints


def _clip_line_to_box(c, normal, direction, region):
    """Segment of the line {p : p . normal = c} inside the box, ordered along ``direction``."""
    e0, n0, e1, n1 = region
    ne, nn = normal
    ue, un = direction
    base = (c * ne, c * nn)
    t_lo, t_hi = -math.inf, math.inf
    for p, d, lo, hi in ((base[0], ue, e0, e1), (base[1], un, n0, n1)):
        if abs(d) < 1e-12:
            if p < lo - 1e-9 or p > hi + 1e-9:
                return None
            continue
        ta, tb = (lo - p) / d, (hi - p) / d
        t_lo, t_hi = max(t_lo, min(ta, tb)), min(t_hi, max(ta, tb))
    if t_hi < t_lo:
        return None

    def at(t):
        e = min(max(base[0] + t * ue, e0), e1)
        n = min(max(base[1] + t * un, n0), n1)
        return GeoPoint(e, n)

    return at(t_lo), at(t_hi)


def plan_coverage_goto(points: Sequence[GeoPoint], dedup_radius: float = 0.5) -> list[GeoPoint]:
    """Stored positions in stored order, dropping points closer than
    ``dedup_radius`` to the previously kept one."""
    if not points:
        raise MissionError("empty pipeline map: nothing to cover")
    plan = [points[0]]
    for p in points[1:]:
        if p.dist(plan[-1]) >= dedup_radius:
            plan.append(p)
    return plan


# -- state machine ------------------------------------------------------


@dataclass(frozen=True)
class MissionState:
    config: MissionConfig
    rows_plan: tuple[GeoPoint, ...]
    phase: str = M_SEARCH
    pipe_lost: int = 0
    lost_timer: float = 0.0
    search_timer: float = 0.0
    search_active: bool = False
    pipeline_map: tuple[GeoPoint, ...] = ()
    last_known: GeoPoint | None = None
    target: GeoPoint | None = None
    recent: tuple[GeoPoint, ...] = ()  # sightings since the last approach started
    hint: tuple[float, float] | None = None  # unit direction used until two sightings exist
    map_mark: int = 0  # map length when the current approach began
    rows_index: int = 0
    tracking_complete: bool = False
    coverage_plan: tuple[GeoPoint, ...] | None = None
    coverage_index: int = 0
    coverage_done: bool = False
    station_anchor: GeoPoint | None = None
    stored: GeoPoint | None = field(default=None, compare=False)  # point appended this step


def initial_mission(config: MissionConfig, rows_plan: Sequence[GeoPoint]) -> MissionState:
    if not rows_plan:
        raise MissionError("empty rows plan")
    return MissionState(config=config, rows_plan=tuple(rows_plan))


def _rows_command(ms: MissionState, vehicle: VehicleState, purpose: str) -> tuple[MissionState, SetWaypoint]:
    plan, idx = ms.rows_plan, ms.rows_index
    # skip waypoints already within reach; never loop more than once per step
    for _ in range(len(plan)):
        if vehicle.position.dist(plan[idx % len(plan)]) > ms.config.capture_radius:
            break
        idx += 1
    idx %= len(plan)
    return replace(ms, rows_index=idx), SetWaypoint(plan[idx], ms.config.speed, purpose)


def _track_line(ms: MissionState) -> tuple[GeoPoint, GeoPoint] | None:
    """Two points on the pipeline estimate, the second one ahead.

    Sightings within ``line_window`` of the newest one are fitted with a
    total-least-squares line, which averages out the position noise of single
    sightings; the hint orients it since sightings taken while turning need
    not be ordered along the pipe.
    """
    pts = ms.recent
    if not pts:
        return None
    cfg = ms.config
    newest = pts[-1]
    window = [newest]
    for p in reversed(pts[:-1]):
        if p.dist(newest) > cfg.line_window:
            break
        window.append(p)
    window.reverse()
    span = max(p.dist(q) for p in window for q in (window[0], newest))
    if span < cfg.line_baseline:
        if ms.hint is None:
            return None
        return GeoPoint(newest.east - ms.hint[0], newest.north - ms.hint[1]), newest
    me = sum(p.east for p in window) / len(window)
    mn = sum(p.north for p in window) / len(window)
    see = sum((p.east - me) ** 2 for p in window)
    snn = sum((p.north - mn) ** 2 for p in window)
    sen = sum((p.east - me) * (p.north - mn) for p in window)
    theta = 0.5 * math.atan2(2 * sen, see - snn)
    ue, un = math.cos(theta), math.sin(theta)
    ref = ms.hint or (newest.east - window[0].east, newest.north - window[0].north)
    if ue * ref[0] + un * ref[1] < 0:
        ue, un = -ue, -un
    along = [(p.east - me) * ue + (p.north - mn) * un for p in window]
    lo, hi = min(along), max(along)
    return GeoPoint(me + lo * ue, mn + lo * un), GeoPoint(me + hi * ue, mn + hi * un)


def _tracking_command(ms: MissionState, vehicle: VehicleState) -> TrackHeading:
    cfg = ms.config
    line = _track_line(ms)
    if line is None:
        return TrackHeading(vehicle.heading, cfg.speed)
    p1, p2 = line
    length = p1.dist(p2)
    ue, un = (p2.east - p1.east) / length, (p2.north - p1.north) / length
    # shift the line sideways towards the vehicle by the tracking offset
    side = (vehicle.position.east - p2.east) * un - (vehicle.position.north - p2.north) * ue
    sign = 1.0 if side >= 0 else -1.0
    de, dn = sign * un * cfg.track_offset, -sign * ue * cfg.track_offset
    q1 = GeoPoint(p1.east + de, p1.north + dn)
    q2 = GeoPoint(p2.east + de, p2.north + dn)
    return projected_line_guidance(q1, q2, vehicle, cfg.lookahead, cfg.speed)


def _direction_hint(ms: MissionState, at: GeoPoint, heading: float) -> tuple[float, float]:
    ue, un = heading_vector(heading)
    if ms.pipeline_map:
        nearest = min(ms.pipeline_map, key=at.dist)
        # head away from the part already mapped
        if (at.east - nearest.east) * ue + (at.north - nearest.north) * un < 0:
            ue, un = -ue, -un
    return ue, un


def local_search_plan(ms: MissionState, vehicle: VehicleState) -> tuple[GeoPoint, ...]:
    """Legs parallel to the tracked line around the last known position.

    Legs nearest the line come first, starting on the vehicle's side, so the
    continuation of a pipeline past a short gap is found early.
    """
    cfg = ms.config
    center = ms.last_known or vehicle.position
    line = _track_line(ms)
    h = bearing(*line) if line is not None else vehicle.heading
    ue, un = heading_vector(h)
    ne, nn = un, -ue
    side = (vehicle.position.east - center.east) * ne + (vehicle.position.north - center.north) * nn
    first = 1.0 if side >= 0 else -1.0
    n_side = max(1, int(cfg.search_width / 2 // cfg.search_spacing))
    offsets = []
    for k in range(1, n_side + 1):
        offsets += [first * k * cfg.search_spacing, -first * k * cfg.search_spacing]
    a0, a1 = -cfg.search_length / 8, 7 * cfg.search_length / 8
    plan = []
    for i, c in enumerate(offsets):
        ends = (a0, a1) if i % 2 == 0 else (a1, a0)
        plan += [GeoPoint(center.east + c * ne + a * ue, center.north + c * nn + a * un) for a in ends]
    return tuple(plan)


def _is_new(ms: MissionState, p: GeoPoint, upto: int | None = None) -> bool:
    """Whether ``p`` is away from the stored points (the first ``upto`` of them)."""
    return all(p.dist(q) > ms.config.revisit_radius for q in ms.pipeline_map[:upto])


def step_mission(ms: MissionState, vehicle: VehicleState, det: DetectionEvent | None,
                 dt: float) -> tuple[MissionState, Command]:
    if dt <= 0:
        raise MissionError(f"dt must be positive, got {dt}")
    cfg = ms.config
    ms = replace(ms, stored=None)
    sighting = det.geo if det is not None else None
    if sighting is not None and ms.phase in (M_STEERING, M_TRACKING) and not _is_new(ms, sighting, ms.map_mark):
        sighting = None  # part of the pipeline mapped before this approach
    pos = vehicle.position

    if ms.phase == M_SEARCH:
        if sighting is not None and _is_new(ms, sighting):
            ms = replace(ms, phase=M_STEERING, target=sighting, last_known=sighting, pipe_lost=0,
                         lost_timer=0.0, search_active=False, search_timer=0.0, recent=(sighting,),
                         map_mark=len(ms.pipeline_map),
                         hint=ms.hint or _direction_hint(ms, sighting, vehicle.heading))
            return ms, SetWaypoint(sighting, cfg.speed, "approach")
        if ms.search_active:
            timer = ms.search_timer + dt
            if timer >= cfg.t_search and ms.last_known is not None:
                ms = replace(ms, phase=M_STEERING, target=ms.last_known, tracking_complete=True,
                             search_active=False, search_timer=timer)
                return ms, SetWaypoint(ms.last_known, cfg.speed, "last_known")
            ms = replace(ms, search_timer=timer)
        return _rows_command(ms, vehicle, "search" if ms.search_active else "rows")

    if ms.phase == M_STEERING and not ms.tracking_complete:
        if sighting is not None:
            ms = replace(ms, recent=ms.recent + (sighting,), last_known=sighting, lost_timer=0.0, pipe_lost=0)
        if pos.dist(ms.target) <= cfg.capture_radius:
            ms = replace(ms, phase=M_TRACKING, lost_timer=0.0)
            return ms, _tracking_command(ms, vehicle)
        return ms, SetWaypoint(ms.target, cfg.speed, "approach")

    if ms.phase == M_STEERING:
        if ms.coverage_plan is None:
            if pos.dist(ms.target) > cfg.capture_radius:
                return ms, SetWaypoint(ms.target, cfg.speed, "last_known")
            if not ms.pipeline_map:
                ms = replace(ms, phase=M_SURFACE, coverage_plan=(), coverage_done=True)
                return ms, Surface()
            ms = replace(ms, coverage_plan=tuple(plan_coverage_goto(ms.pipeline_map, cfg.dedup_radius)),
                         coverage_index=0)
        plan, idx = ms.coverage_plan, ms.coverage_index
        while idx < len(plan) and pos.dist(plan[idx]) <= cfg.capture_radius:
            idx += 1
        if idx >= len(plan):
            ms = replace(ms, phase=M_SURFACE, coverage_index=idx, coverage_done=True)
            return ms, Surface()
        ms = replace(ms, coverage_index=idx)
        return ms, SetWaypoint(plan[idx], cfg.speed, "coverage")

    if ms.phase == M_TRACKING:
        if sighting is not None:
            ms = replace(ms, pipeline_map=ms.pipeline_map + (sighting,), recent=(ms.recent + (sighting,))[-64:],
                         last_known=sighting, lost_timer=0.0, pipe_lost=0, stored=sighting)
            line = _track_line(ms)
            if line is not None:
                # carry the direction along so it survives slow bends
                ms = replace(ms, hint=heading_vector(bearing(*line)))
        else:
            timer = ms.lost_timer + dt
            if timer >= cfg.t_lost:
                ms = replace(ms, lost_timer=timer, pipe_lost=1)
                ms = replace(ms, phase=M_SEARCH, search_active=True, search_timer=0.0,
                             rows_plan=local_search_plan(ms, vehicle), rows_index=0)
                return _rows_command(ms, vehicle, "search")
            ms = replace(ms, lost_timer=timer)
        return ms, _tracking_command(ms, vehicle)

    if ms.phase == M_SURFACE:
        if vehicle.depth <= cfg.surface_depth:
            ms = replace(ms, phase=M_STATION, station_anchor=pos)
            return ms, StationKeep(pos)
        return ms, Surface()

    if ms.phase == M_STATION:
        anchor = ms.station_anchor or pos
        return replace(ms, station_anchor=anchor), StationKeep(anchor)

    raise MissionError(f"unknown phase {ms.phase!r}")


def abort(ms: MissionState, vehicle: VehicleState) -> MissionState:
    """Failsafe: leave the inspection and surface (idempotent once stopped)."""
    if ms.phase == M_STATION:
        return ms
    if vehicle.depth <= ms.config.surface_depth:
        return replace(ms, phase=M_STATION, station_anchor=ms.station_anchor or vehicle.position)
    return replace(ms, phase=M_SURFACE)
