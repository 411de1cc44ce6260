"""Planar geometry for building footprints and the SAR layover model.

All azimuths are compass azimuths: degrees clockwise from north. Coordinates
are (x east, y north) in meters in a local planar frame, so the unit vector of
azimuth ``a`` is ``(sin a, cos a)``.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

Point = tuple[float, float]

EPS_M = 1e-9
AXIS_TOL_DEG = 1e-6


class GeometryError(ValueError):
    pass


class InvalidInputError(GeometryError):
    pass


class DegenerateGeometryError(GeometryError):
    pass


class GeometryInfeasibleError(GeometryError):
    pass


class AxisMismatchError(GeometryError):
    pass


class ClampedHeightWarning(UserWarning):
    """Measured layover length was negative and the height was clamped to 0."""


class Pass(str, Enum):
    ASCENDING = "ascending"
    DESCENDING = "descending"


class LookSide(str, Enum):
    LEFT = "left"
    RIGHT = "right"


class Projection(str, Enum):
    """How a building height maps to a ground-range layover length."""

    COS = "cos"
    COT = "cot"


def _cross(o: Point, a: Point, b: Point) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def signed_area(vertices: Sequence[Point]) -> float:
    """Shoelace area; positive for counter-clockwise rings."""
    total = 0.0
    n = len(vertices)
    for i in range(n):
        x0, y0 = vertices[i]
        x1, y1 = vertices[(i + 1) % n]
        total += x0 * y1 - x1 * y0
    return 0.5 * total


def polygon_centroid(vertices: Sequence[Point]) -> Point:
    a = signed_area(vertices)
    if a == 0.0:
        raise DegenerateGeometryError("centroid of a zero-area polygon is undefined")
    cx = cy = 0.0
    n = len(vertices)
    # shift to the first vertex to keep the products small
    ox, oy = vertices[0]
    for i in range(n):
        x0, y0 = vertices[i][0] - ox, vertices[i][1] - oy
        x1, y1 = vertices[(i + 1) % n][0] - ox, vertices[(i + 1) % n][1] - oy
        c = x0 * y1 - x1 * y0
        cx += (x0 + x1) * c
        cy += (y0 + y1) * c
    return (ox + cx / (6.0 * a), oy + cy / (6.0 * a))


def _on_segment(p: Point, a: Point, b: Point) -> bool:
    return (
        min(a[0], b[0]) <= p[0] <= max(a[0], b[0])
        and min(a[1], b[1]) <= p[1] <= max(a[1], b[1])
    )


def segments_intersect(p1: Point, p2: Point, q1: Point, q2: Point) -> bool:
    d1 = _cross(q1, q2, p1)
    d2 = _cross(q1, q2, p2)
    d3 = _cross(p1, p2, q1)
    d4 = _cross(p1, p2, q2)
    if ((d1 > 0 and d2 < 0) or (d1 < 0 and d2 > 0)) and (
        (d3 > 0 and d4 < 0) or (d3 < 0 and d4 > 0)
    ):
        return True
    if d1 == 0 and _on_segment(p1, q1, q2):
        return True
    if d2 == 0 and _on_segment(p2, q1, q2):
        return True
    if d3 == 0 and _on_segment(q1, p1, p2):
        return True
    if d4 == 0 and _on_segment(q2, p1, p2):
        return True
    return False


def is_simple(vertices: Sequence[Point]) -> bool:
    n = len(vertices)
    for i in range(n):
        a, s, b = vertices[i - 1], vertices[i], vertices[(i + 1) % n]
        # consecutive edges folding back onto each other
        if a == s or (
            _cross(s, a, b) == 0
            and (a[0] - s[0]) * (b[0] - s[0]) + (a[1] - s[1]) * (b[1] - s[1]) > 0
        ):
            return False
    for i in range(n):
        for j in range(i + 2, n):
            if i == 0 and j == n - 1:
                continue
            if segments_intersect(vertices[i], vertices[(i + 1) % n], vertices[j], vertices[(j + 1) % n]):
                return False
    return True


@dataclass(frozen=True)
class Footprint:
    """A building outline (open ring, meters) with its reference height.

    Vertices are normalized to counter-clockwise order on construction.
    """

    id: str
    vertices: tuple[Point, ...]
    height_m: float = 0.0

    def __post_init__(self):
        verts = tuple((float(x), float(y)) for x, y in self.vertices)
        if len(verts) < 3:
            raise InvalidInputError(f"footprint {self.id!r}: needs at least 3 vertices")
        if not all(math.isfinite(c) for v in verts for c in v):
            raise InvalidInputError(f"footprint {self.id!r}: non-finite coordinate")
        if not (math.isfinite(self.height_m) and self.height_m >= 0):
            raise InvalidInputError(f"footprint {self.id!r}: height must be >= 0")
        if len(convex_hull(verts)) < 3:
            raise DegenerateGeometryError(f"footprint {self.id!r}: collinear vertices")
        if not is_simple(verts):
            raise InvalidInputError(f"footprint {self.id!r}: polygon self-intersects")
        area = signed_area(verts)
        if area == 0.0:
            raise DegenerateGeometryError(f"footprint {self.id!r}: zero area")
        if area < 0:
            verts = verts[::-1]
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "height_m", float(self.height_m))

    @property
    def area_m2(self) -> float:
        return signed_area(self.vertices)

    @property
    def centroid(self) -> Point:
        return polygon_centroid(self.vertices)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.vertices, dtype=np.float64)


def azimuth_vector(azimuth_deg: float) -> np.ndarray:
    a = math.radians(azimuth_deg)
    return np.array([math.sin(a), math.cos(a)])


def normalize_azimuth(azimuth_deg: float) -> float:
    a = math.fmod(azimuth_deg, 360.0)
    if a < 0:
        a += 360.0
    return 0.0 if a >= 360.0 else a


def azimuth_difference(a_deg: float, b_deg: float) -> float:
    """Smallest absolute angular difference between two azimuths, in degrees."""
    d = abs(normalize_azimuth(a_deg) - normalize_azimuth(b_deg))
    return min(d, 360.0 - d)


def _vector_azimuth(dx: float, dy: float) -> float:
    return normalize_azimuth(math.degrees(math.atan2(dx, dy)))


@dataclass(frozen=True)
class OrientedRect:
    center: Point
    extent_u_m: float
    extent_v_m: float
    u_azimuth_deg: float

    def __post_init__(self):
        if self.extent_u_m < 0 or self.extent_v_m < 0:
            raise InvalidInputError("rectangle extents must be >= 0")
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))
        object.__setattr__(self, "u_azimuth_deg", normalize_azimuth(self.u_azimuth_deg))

    @property
    def v_azimuth_deg(self) -> float:
        return normalize_azimuth(self.u_azimuth_deg + 90.0)

    @property
    def area_m2(self) -> float:
        return self.extent_u_m * self.extent_v_m

    def corners(self) -> list[Point]:
        """Corners starting at the north-west-most one, then clockwise."""
        u = azimuth_vector(self.u_azimuth_deg)
        v = azimuth_vector(self.v_azimuth_deg)
        c = np.asarray(self.center)
        hu, hv = 0.5 * self.extent_u_m, 0.5 * self.extent_v_m
        ring = [c + su * hu * u + sv * hv * v for su, sv in ((1, 1), (1, -1), (-1, -1), (-1, 1))]
        # (u, v) is a right-handed compass pair, so this ring runs counter-clockwise
        ring = [(float(p[0]), float(p[1])) for p in ring[::-1]]
        start = max(range(4), key=lambda i: (round(ring[i][1] - ring[i][0], 9), ring[i][1]))
        return ring[start:] + ring[:start]

    def local_coords(self, points) -> np.ndarray:
        """Project points onto (u, v) offsets from the center."""
        p = np.asarray(points, dtype=np.float64) - np.asarray(self.center)
        u = azimuth_vector(self.u_azimuth_deg)
        v = azimuth_vector(self.v_azimuth_deg)
        return np.stack([p @ u, p @ v], axis=-1)

    def contains(self, points, tol: float = EPS_M) -> bool:
        uv = self.local_coords(points)
        return bool(
            np.all(np.abs(uv[..., 0]) <= 0.5 * self.extent_u_m + tol)
            and np.all(np.abs(uv[..., 1]) <= 0.5 * self.extent_v_m + tol)
        )


@dataclass(frozen=True)
class AcquisitionGeometry:
    incidence_deg: float
    orbit_inclination_deg: float = 97.86
    pass_: Pass = Pass.DESCENDING
    look_side: LookSide = LookSide.RIGHT
    latitude_deg: float = 0.0
    heading_override_deg: float | None = None

    def __post_init__(self):
        if not 0.0 < self.incidence_deg < 90.0:
            raise InvalidInputError("incidence_deg must lie strictly inside (0, 90)")
        if not 0.0 < self.orbit_inclination_deg < 180.0:
            raise InvalidInputError("orbit_inclination_deg must lie inside (0, 180)")
        if not -90.0 < self.latitude_deg < 90.0:
            raise InvalidInputError("latitude_deg must lie inside (-90, 90)")
        if self.heading_override_deg is not None and not 0.0 <= self.heading_override_deg < 360.0:
            raise InvalidInputError("heading_override_deg must lie in [0, 360)")
        object.__setattr__(self, "pass_", Pass(self.pass_))
        object.__setattr__(self, "look_side", LookSide(self.look_side))

    @property
    def cos_theta(self) -> float:
        return math.cos(math.radians(self.incidence_deg))

    @classmethod
    def from_dict(cls, d: dict) -> "AcquisitionGeometry":
        d = dict(d)
        if "pass" in d:
            d["pass_"] = d.pop("pass")
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "incidence_deg": self.incidence_deg,
            "orbit_inclination_deg": self.orbit_inclination_deg,
            "pass": self.pass_.value,
            "look_side": self.look_side.value,
            "latitude_deg": self.latitude_deg,
            "heading_override_deg": self.heading_override_deg,
        }


def convex_hull(points: Iterable[Point]) -> list[Point]:
    """Monotone-chain hull, counter-clockwise, collinear points dropped."""
    pts = sorted({(float(x), float(y)) for x, y in points})
    if not pts:
        raise InvalidInputError("convex hull of an empty point set")
    if len(pts) <= 2:
        return pts

    lower: list[Point] = []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[Point] = []
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return lower[:-1] + upper[:-1]


def _vertices_of(shape) -> list[Point]:
    if isinstance(shape, Footprint):
        return list(shape.vertices)
    return [(float(x), float(y)) for x, y in shape]


def _axis_box(points: np.ndarray, u_az: float) -> OrientedRect:
    u = azimuth_vector(u_az)
    v = azimuth_vector(u_az + 90.0)
    pu = points @ u
    pv = points @ v
    umin, umax = pu.min(), pu.max()
    vmin, vmax = pv.min(), pv.max()
    mid_u, mid_v = 0.5 * (umin + umax), 0.5 * (vmin + vmax)
    center = mid_u * u + mid_v * v
    return OrientedRect(
        center=(float(center[0]), float(center[1])),
        extent_u_m=float(umax - umin),
        extent_v_m=float(vmax - vmin),
        u_azimuth_deg=u_az,
    )


def min_enclosing_rect(footprint) -> OrientedRect:
    """Minimum-area enclosing rectangle by rotating calipers.

    The u axis follows the longer side and is reported in [0, 180). Equal-area
    candidates (triangles often have several) are broken by smaller perimeter
    so the choice does not depend on how the footprint is oriented.
    """
    verts = _vertices_of(footprint)
    hull = convex_hull(verts)
    if len(hull) < 3:
        raise DegenerateGeometryError("footprint vertices are collinear")
    pts = np.asarray(hull)
    best = None
    n = len(hull)
    for i in range(n):
        dx = hull[(i + 1) % n][0] - hull[i][0]
        dy = hull[(i + 1) % n][1] - hull[i][1]
        box = _axis_box(pts, _vector_azimuth(dx, dy))
        if best is None:
            best = box
            continue
        rel = (box.area_m2 - best.area_m2) / best.area_m2
        perim_gain = (best.extent_u_m + best.extent_v_m) - (box.extent_u_m + box.extent_v_m)
        if rel < -1e-9 or (rel <= 1e-9 and perim_gain > 1e-9 * (best.extent_u_m + best.extent_v_m)):
            best = box
    assert best is not None
    if best.extent_v_m > best.extent_u_m:
        best = OrientedRect(best.center, best.extent_v_m, best.extent_u_m, best.u_azimuth_deg + 90.0)
    az = best.u_azimuth_deg
    if az >= 180.0:
        best = OrientedRect(best.center, best.extent_u_m, best.extent_v_m, az - 180.0)
    return best


def ground_track_heading(geom: AcquisitionGeometry) -> float:
    """Satellite ground-track azimuth at the scene latitude (spherical, non-rotating Earth)."""
    if geom.heading_override_deg is not None:
        return geom.heading_override_deg
    cos_i = math.cos(math.radians(geom.orbit_inclination_deg))
    cos_lat = math.cos(math.radians(geom.latitude_deg))
    ratio = cos_i / cos_lat
    if abs(ratio) > 1.0 + 1e-12:
        raise GeometryInfeasibleError(
            f"orbit with inclination {geom.orbit_inclination_deg} deg never reaches "
            f"latitude {geom.latitude_deg} deg"
        )
    alpha = math.degrees(math.asin(max(-1.0, min(1.0, ratio))))
    if geom.pass_ is Pass.ASCENDING:
        return normalize_azimuth(360.0 + alpha)
    return normalize_azimuth(180.0 - alpha)


def range_azimuth(geom: AcquisitionGeometry) -> float:
    """Azimuth of increasing ground range (pointing away from the sensor track)."""
    heading = ground_track_heading(geom)
    turn = 90.0 if geom.look_side is LookSide.RIGHT else -90.0
    return normalize_azimuth(heading + turn)


def heading_aligned_bbox(footprint, range_az_deg: float) -> OrientedRect:
    """Smallest rectangle with u fixed along the range azimuth that covers the footprint."""
    verts = _vertices_of(footprint)
    if len(convex_hull(verts)) < 3:
        raise DegenerateGeometryError("footprint vertices are collinear")
    return _axis_box(np.asarray(verts), normalize_azimuth(range_az_deg))


def layover_factor(incidence_deg: float, projection: Projection | str = Projection.COS) -> float:
    """Layover length per meter of building height."""
    t = math.radians(incidence_deg)
    if Projection(projection) is Projection.COS:
        return math.cos(t)
    return 1.0 / math.tan(t)


def layover_factor_from_cos(cos_theta: float, projection: Projection | str = Projection.COS) -> float:
    if Projection(projection) is Projection.COS:
        return cos_theta
    return cos_theta / math.sqrt(1.0 - cos_theta * cos_theta)


def project_bbb(
    fbb: OrientedRect,
    height_m: float,
    geom: AcquisitionGeometry,
    projection: Projection | str = Projection.COS,
) -> OrientedRect:
    """Forward layover model: stretch the FBB toward the sensor by the layover length."""
    if not (height_m >= 0 and math.isfinite(height_m)):
        raise InvalidInputError(f"height must be a finite value >= 0, got {height_m}")
    raz = range_azimuth(geom)
    if azimuth_difference(fbb.u_azimuth_deg, raz) > AXIS_TOL_DEG:
        raise AxisMismatchError(
            f"FBB u axis {fbb.u_azimuth_deg} deg is not the range azimuth {raz} deg"
        )
    lay = height_m * layover_factor(geom.incidence_deg, projection)
    shift = -0.5 * lay * azimuth_vector(fbb.u_azimuth_deg)
    return OrientedRect(
        center=(fbb.center[0] + shift[0], fbb.center[1] + shift[1]),
        extent_u_m=fbb.extent_u_m + lay,
        extent_v_m=fbb.extent_v_m,
        u_azimuth_deg=fbb.u_azimuth_deg,
    )


def height_from_lengths(
    lbbb_m: float,
    lfbb_m: float,
    incidence_deg: float,
    projection: Projection | str = Projection.COS,
) -> tuple[float, bool]:
    """Return (height, clamped) from range lengths of the BBB and FBB."""
    diff = lbbb_m - lfbb_m
    if diff < 0:
        return 0.0, True
    return diff / layover_factor(incidence_deg, projection), False


def height_from_boxes(
    fbb: OrientedRect,
    bbb: OrientedRect,
    geom: AcquisitionGeometry,
    projection: Projection | str = Projection.COS,
) -> float:
    """Invert the layover model: h = (L_BBB - L_FBB) / cos(theta) for the default projection.

    A negative length difference is clamped to 0 and reported with a
    :class:`ClampedHeightWarning`.
    """
    if azimuth_difference(fbb.u_azimuth_deg, bbb.u_azimuth_deg) > AXIS_TOL_DEG:
        raise AxisMismatchError(
            f"FBB axis {fbb.u_azimuth_deg} deg and BBB axis {bbb.u_azimuth_deg} deg differ"
        )
    h, clamped = height_from_lengths(bbb.extent_u_m, fbb.extent_u_m, geom.incidence_deg, projection)
    if clamped:
        warnings.warn(
            f"BBB shorter than FBB by {fbb.extent_u_m - bbb.extent_u_m:.6g} m; height clamped to 0",
            ClampedHeightWarning,
            stacklevel=2,
        )
    return h


def polygon_distance(a: Sequence[Point], b: Sequence[Point]) -> float:
    """Euclidean distance between two simple polygons (0 when they touch or overlap)."""
    na, nb = len(a), len(b)
    for i in range(na):
        for j in range(nb):
            if segments_intersect(a[i], a[(i + 1) % na], b[j], b[(j + 1) % nb]):
                return 0.0
    if points_in_polygon(np.asarray(a[:1]), b)[0] or points_in_polygon(np.asarray(b[:1]), a)[0]:
        return 0.0
    best = math.inf
    for p_set, q_ring in ((a, b), (b, a)):
        q = np.asarray(q_ring)
        q_next = np.roll(q, -1, axis=0)
        seg = q_next - q
        seg_len2 = np.einsum("ij,ij->i", seg, seg)
        for p in p_set:
            t = np.clip(np.einsum("ij,ij->i", np.asarray(p) - q, seg) / seg_len2, 0.0, 1.0)
            proj = q + t[:, None] * seg
            best = min(best, float(np.sqrt(((proj - np.asarray(p)) ** 2).sum(axis=1)).min()))
    return best


def points_in_polygon(points: np.ndarray, ring: Sequence[Point]) -> np.ndarray:
    """Even-odd containment test for an (N, 2) array of points."""
    pts = np.asarray(points, dtype=np.float64)
    x, y = pts[..., 0], pts[..., 1]
    inside = np.zeros(x.shape, dtype=bool)
    n = len(ring)
    for i in range(n):
        x0, y0 = ring[i]
        x1, y1 = ring[(i + 1) % n]
        if y0 == y1:
            continue
        crosses = (y0 > y) != (y1 > y)
        x_at = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (x < x_at)
    return inside


# ---------------------------------------------------------------- file I/O


def read_footprints(path) -> tuple[str, list[Footprint], dict]:
    """Load a footprint collection; returns (city, footprints, raw document)."""
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("crs") != "local-meters":
        raise InvalidInputError(f"{path}: unsupported crs {doc.get('crs')!r}")
    out = []
    for b in doc.get("buildings", []):
        ring = [tuple(p) for p in b["polygon"]]
        if len(ring) > 1 and ring[0] == ring[-1]:
            raise InvalidInputError(f"{path}: building {b['id']!r} repeats its first vertex")
        out.append(Footprint(str(b["id"]), tuple(ring), float(b["height_m"])))
    return str(doc.get("city", "")), out, doc


def write_footprints(path, city: str, footprints: Sequence[Footprint], **extra) -> None:
    doc = {
        "crs": "local-meters",
        "city": city,
        **extra,
        "buildings": [
            {"id": f.id, "polygon": [list(v) for v in f.vertices], "height_m": f.height_m}
            for f in footprints
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1), encoding="utf-8")
