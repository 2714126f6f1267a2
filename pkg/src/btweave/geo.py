"""Local tangent-plane coordinates and side-scan sonar geometry.

Headings are in radians, 0 = north, clockwise positive. Local points are
(east, north) metres from the mission origin.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

M_PER_DEG_LAT = 111_320.0


class GeometryError(ValueError):
    pass


class GeoPoint(NamedTuple):
    east: float
    north: float

    def dist(self, other: "GeoPoint") -> float:
        return math.hypot(self.east - other.east, self.north - other.north)


@dataclass(frozen=True)
class LocalFrame:
    """Flat-earth frame anchored at ``(lat0, lon0)``; fine for missions under ~50 km."""

    lat0: float
    lon0: float

    def __post_init__(self):
        if abs(self.lat0) > 90 or abs(self.lon0) > 180:
            raise GeometryError(f"origin out of range: {self.lat0}, {self.lon0}")

    @property
    def m_per_deg_lon(self) -> float:
        return M_PER_DEG_LAT * math.cos(math.radians(self.lat0))

    def to_local(self, lat: float, lon: float) -> GeoPoint:
        return GeoPoint((lon - self.lon0) * self.m_per_deg_lon, (lat - self.lat0) * M_PER_DEG_LAT)

    def to_latlon(self, p: GeoPoint) -> tuple[float, float]:
        return self.lat0 + p.north / M_PER_DEG_LAT, self.lon0 + p.east / self.m_per_deg_lon


def geo_local_roundtrip(frame: LocalFrame, lat: float, lon: float) -> tuple[float, float]:
    return frame.to_latlon(frame.to_local(lat, lon))


def heading_vector(heading: float) -> tuple[float, float]:
    return math.sin(heading), math.cos(heading)


def bearing(src: GeoPoint, dst: GeoPoint) -> float:
    return math.atan2(dst.east - src.east, dst.north - src.north)


def wrap_angle(a: float) -> float:
    """Wrap to [-pi, pi)."""
    return (a + math.pi) % (2 * math.pi) - math.pi


# ---------------------------------------------------------------------------
# Side-scan sonar


@dataclass(frozen=True)
class SonarConfig:
    max_range: float = 30.0  # per side, slant range (m)
    resolution: float = 0.05  # across-track metres per pixel
    lag: float = 2.0  # ping-to-detection delay (s)

    def __post_init__(self):
        if self.max_range <= 0 or self.resolution <= 0 or self.lag < 0:
            raise GeometryError(f"invalid sonar config {self}")

    @property
    def image_width(self) -> float:
        """Waterfall width in pixels: port half on the left, starboard on the right."""
        return 2 * self.max_range / self.resolution


@dataclass(frozen=True)
class BBox:
    """Normalised bounding box (x, y = top-left corner; w, h = size)."""

    x: float
    y: float
    w: float
    h: float

    @property
    def mid_x(self) -> float:
        return self.x + self.w / 2


def bbox_side(bbox: BBox) -> str:
    return "port" if bbox.mid_x < 0.5 else "starboard"


def bbox_slant_range(bbox: BBox, cfg: SonarConfig) -> float:
    pixels = abs(bbox.mid_x * cfg.image_width - cfg.image_width / 2)
    return pixels * cfg.resolution


def bbox_for_slant(slant: float, side: str, cfg: SonarConfig, w: float = 0.01, h: float = 0.02) -> BBox:
    """Box whose middle sits at ``slant`` metres on ``side``; inverse of bbox_slant_range."""
    offset = slant / cfg.resolution / cfg.image_width
    mid = 0.5 + offset if side == "starboard" else 0.5 - offset
    return BBox(mid - w / 2, 0.5 - h / 2, w, h)


def ground_range(slant: float, altitude: float) -> float:
    if slant <= altitude:
        raise GeometryError(f"slant range {slant} m not beyond altitude {altitude} m (target under vehicle)")
    return math.sqrt(slant * slant - altitude * altitude)


def georeference(bbox: BBox, cfg: SonarConfig, position: GeoPoint, heading: float,
                 altitude: float) -> GeoPoint:
    """Geo-reference a detection using the vehicle pose at ping time."""
    slant = bbox_slant_range(bbox, cfg)
    g = ground_range(slant, altitude)
    side = bbox_side(bbox)
    beam = heading + (math.pi / 2 if side == "starboard" else -math.pi / 2)
    de, dn = heading_vector(beam)
    return GeoPoint(position.east + g * de, position.north + g * dn)
