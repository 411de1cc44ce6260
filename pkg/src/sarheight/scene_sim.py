"""Synthetic cities and cartoon SAR amplitude rasters.

The amplitude model is piecewise constant: shadow < background < roof <
layover, with optional single-look speckle (unit-mean exponential
multipliers). Every random draw comes from a substream keyed by
``(seed, stream, index)`` so results never depend on evaluation order.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import (
    AcquisitionGeometry,
    Footprint,
    Projection,
    azimuth_vector,
    convex_hull,
    layover_factor,
    points_in_polygon,
    polygon_distance,
    range_azimuth,
    signed_area,
)

STREAM_BUILDING = 1
STREAM_SPECKLE = 2


class SceneError(ValueError):
    pass


class CapacityError(SceneError):
    def __init__(self, achieved: int, requested: int):
        super().__init__(f"placed only {achieved} of {requested} buildings")
        self.achieved = achieved
        self.requested = requested


class OutOfExtentError(SceneError):
    def __init__(self, ids: Sequence[str]):
        super().__init__(f"buildings outside the raster extent: {', '.join(ids)}")
        self.ids = list(ids)


class RasterFormatError(ValueError):
    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def substream(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(stream, index)))


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    extent_m: tuple[float, float]
    geom: AcquisitionGeometry
    pixel_size_m: float = 2.5
    n_buildings: int = 100
    footprint_side_range_m: tuple[float, float] = (8.0, 30.0)
    height_distribution: dict = field(default_factory=lambda: {"lognormal": (2.3, 0.6)})
    min_spacing_m: float = 5.0
    background_amp: float = 1.0
    roof_amp: float = 2.0
    layover_amp: float = 4.0
    shadow_amp: float = 0.2
    speckle: str = "off"
    projection: str = "cos"
    random_orientation: bool = False
    max_attempts_per_building: int = 200

    def __post_init__(self):
        if self.pixel_size_m <= 0:
            raise SceneError("pixel_size_m must be > 0")
        if self.n_buildings < 0:
            raise SceneError("n_buildings must be >= 0")
        if not self.shadow_amp < self.background_amp < self.layover_amp:
            raise SceneError("amplitudes must satisfy shadow < background < layover")
        if self.roof_amp <= 0 or self.shadow_amp < 0:
            raise SceneError("amplitude levels must be positive (shadow may be 0)")
        lo, hi = self.footprint_side_range_m
        if not 0 < lo <= hi:
            raise SceneError("footprint_side_range_m must satisfy 0 < min <= max")
        if self.speckle not in ("off", "single_look"):
            raise SceneError(f"unknown speckle mode {self.speckle!r}")
        if len(self.height_distribution) != 1 or next(iter(self.height_distribution)) not in (
            "lognormal",
            "uniform",
        ):
            raise SceneError("height_distribution must be {lognormal: [mu, sigma]} or {uniform: [lo, hi]}")
        Projection(self.projection)
        object.__setattr__(self, "extent_m", tuple(float(v) for v in self.extent_m))

    @property
    def width_px(self) -> int:
        return int(round(self.extent_m[0] / self.pixel_size_m))

    @property
    def height_px(self) -> int:
        return int(round(self.extent_m[1] / self.pixel_size_m))

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["geom"] = AcquisitionGeometry.from_dict(d["geom"])
        for key in ("extent_m", "footprint_side_range_m"):
            if key in d:
                d[key] = tuple(d[key])
        if "height_distribution" in d:
            d["height_distribution"] = {k: tuple(v) for k, v in d["height_distribution"].items()}
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["geom"] = self.geom.to_dict()
        d["extent_m"] = list(self.extent_m)
        d["footprint_side_range_m"] = list(self.footprint_side_range_m)
        d["height_distribution"] = {k: list(v) for k, v in self.height_distribution.items()}
        return d


@dataclass(frozen=True, eq=False)
class Raster:
    """North-up float32 grid; ``origin`` is the top-left corner of pixel (0, 0)."""

    values: np.ndarray
    pixel_size_m: float
    origin: tuple[float, float]
    band: str = "amplitude"

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float32)
        if v.ndim != 2 or v.shape[0] == 0 or v.shape[1] == 0:
            raise SceneError("raster values must be a non-empty 2-D grid")
        if not np.all(np.isfinite(v)):
            raise SceneError("raster values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def width_px(self) -> int:
        return self.values.shape[1]

    @property
    def height_px(self) -> int:
        return self.values.shape[0]

    def bounds(self) -> tuple[float, float, float, float]:
        x0, y0 = self.origin
        return (x0, y0 - self.height_px * self.pixel_size_m, x0 + self.width_px * self.pixel_size_m, y0)

    def pixel_of(self, x: float, y: float) -> tuple[int, int]:
        """(row, col) of the pixel containing a map point."""
        return (
            int(math.floor((self.origin[1] - y) / self.pixel_size_m)),
            int(math.floor((x - self.origin[0]) / self.pixel_size_m)),
        )

    def pixel_center(self, row, col):
        p = self.pixel_size_m
        return self.origin[0] + (np.asarray(col) + 0.5) * p, self.origin[1] - (np.asarray(row) + 0.5) * p

    def __eq__(self, other):
        if not isinstance(other, Raster):
            return NotImplemented
        return (
            self.pixel_size_m == other.pixel_size_m
            and self.origin == other.origin
            and self.band == other.band
            and self.values.shape == other.values.shape
            and self.values.tobytes() == other.values.tobytes()
        )


# ---------------------------------------------------------------- rasterization


def _window(shape, origin, pixel, xmin, ymin, xmax, ymax):
    h, w = shape
    x0, y0 = origin
    c0 = max(0, int(math.floor((xmin - x0) / pixel - 0.5)))
    c1 = min(w, int(math.ceil((xmax - x0) / pixel + 0.5)))
    r0 = max(0, int(math.floor((y0 - ymax) / pixel - 0.5)))
    r1 = min(h, int(math.ceil((y0 - ymin) / pixel + 0.5)))
    return r0, r1, c0, c1


def rasterize_polygons(rings, shape, origin, pixel) -> np.ndarray:
    """Union of polygon interiors sampled at pixel centers."""
    out = np.zeros(shape, dtype=bool)
    for ring in rings:
        arr = np.asarray(ring, dtype=np.float64)
        r0, r1, c0, c1 = _window(shape, origin, pixel, *arr.min(axis=0), *arr.max(axis=0))
        if r0 >= r1 or c0 >= c1:
            continue
        xs = origin[0] + (np.arange(c0, c1) + 0.5) * pixel
        ys = origin[1] - (np.arange(r0, r1) + 0.5) * pixel
        gx, gy = np.meshgrid(xs, ys)
        out[r0:r1, c0:c1] |= points_in_polygon(np.stack([gx, gy], axis=-1), ring)
    return out


def swept_rings(ring, offset) -> list:
    """Pieces whose union is the region swept by ``ring`` translated along ``offset``.

    A convex ring sweeps the convex hull of itself and its translate.
    """
    ring = [tuple(map(float, p)) for p in ring]
    dx, dy = float(offset[0]), float(offset[1])
    if dx == 0.0 and dy == 0.0:
        return [ring]
    moved = [(x + dx, y + dy) for x, y in ring]
    hull = convex_hull(ring)
    if abs(abs(signed_area(hull)) - abs(signed_area(ring))) <= 1e-12 * abs(signed_area(ring)):
        return [convex_hull(ring + moved)]
    pieces = [ring, moved]
    n = len(ring)
    for i in range(n):
        a, b = ring[i], ring[(i + 1) % n]
        pieces.append([a, b, moved[(i + 1) % n], moved[i]])
    return pieces


def layover_offset(footprint: Footprint, spec: SceneSpec) -> np.ndarray:
    """Translation of the building top toward the sensor (opposite the range azimuth)."""
    length = footprint.height_m * layover_factor(spec.geom.incidence_deg, spec.projection)
    return -length * azimuth_vector(range_azimuth(spec.geom))


def shadow_offset(footprint: Footprint, spec: SceneSpec) -> np.ndarray:
    length = footprint.height_m * math.tan(math.radians(spec.geom.incidence_deg))
    return length * azimuth_vector(range_azimuth(spec.geom))


def _check_extent(buildings, spec: SceneSpec):
    w, h = spec.width_px * spec.pixel_size_m, spec.height_px * spec.pixel_size_m
    bad = []
    for b in buildings:
        arr = b.as_array()
        if arr[:, 0].min() < 0 or arr[:, 1].min() < 0 or arr[:, 0].max() > w or arr[:, 1].max() > h:
            bad.append(b.id)
    if bad:
        raise OutOfExtentError(bad)


def scene_grid(spec: SceneSpec):
    shape = (spec.height_px, spec.width_px)
    origin = (0.0, spec.height_px * spec.pixel_size_m)
    return shape, origin


def scene_masks(buildings: Sequence[Footprint], spec: SceneSpec):
    """Boolean (layover, roof, shadow) masks of the whole scene."""
    _check_extent(buildings, spec)
    shape, origin = scene_grid(spec)
    p = spec.pixel_size_m
    lay = np.zeros(shape, bool)
    roof = np.zeros(shape, bool)
    shadow = np.zeros(shape, bool)
    for b in buildings:
        lay_rings = swept_rings(b.vertices, layover_offset(b, spec)) if b.height_m > 0 else []
        sh_rings = swept_rings(b.vertices, shadow_offset(b, spec)) if b.height_m > 0 else []
        allpts = np.concatenate([np.asarray(r, dtype=np.float64) for r in [b.vertices, *lay_rings, *sh_rings]])
        r0, r1, c0, c1 = _window(shape, origin, p, *allpts.min(axis=0), *allpts.max(axis=0))
        if r0 >= r1 or c0 >= c1:
            continue
        xs = origin[0] + (np.arange(c0, c1) + 0.5) * p
        ys = origin[1] - (np.arange(r0, r1) + 0.5) * p
        gx, gy = np.meshgrid(xs, ys)
        pts = np.stack([gx, gy], axis=-1)
        fp = points_in_polygon(pts, b.vertices)
        roof[r0:r1, c0:c1] |= fp
        for rings, target in ((lay_rings, lay), (sh_rings, shadow)):
            m = np.zeros(fp.shape, bool)
            for ring in rings:
                m |= points_in_polygon(pts, ring)
            target[r0:r1, c0:c1] |= m & ~fp
    return lay, roof, shadow


def speckle_field(seed: int, shape) -> np.ndarray:
    """Unit-mean exponential multipliers; row ``r`` uses its own substream."""
    h, w = shape
    out = np.empty(shape, dtype=np.float64)
    for r in range(h):
        out[r] = substream(seed, STREAM_SPECKLE, r).exponential(1.0, size=w)
    return out


def render_amplitude(buildings: Sequence[Footprint], spec: SceneSpec) -> Raster:
    lay, roof, shadow = scene_masks(buildings, spec)
    amp = np.full(lay.shape, spec.background_amp, dtype=np.float64)
    amp[shadow] = spec.shadow_amp
    amp[roof] = spec.roof_amp
    amp[lay] = spec.layover_amp
    if spec.speckle == "single_look":
        amp *= speckle_field(spec.seed, amp.shape)
    _, origin = scene_grid(spec)
    return Raster(amp.astype(np.float32), spec.pixel_size_m, origin, "amplitude")


def render_height_truth(buildings: Sequence[Footprint], spec: SceneSpec) -> Raster:
    _check_extent(buildings, spec)
    shape, origin = scene_grid(spec)
    out = np.zeros(shape, dtype=np.float64)
    for b in buildings:
        m = rasterize_polygons([b.vertices], shape, origin, spec.pixel_size_m)
        out[m] = np.maximum(out[m], b.height_m)
    return Raster(out.astype(np.float32), spec.pixel_size_m, origin, "height")


# ---------------------------------------------------------------- city generation


def draw_height(rng: np.random.Generator, dist: dict) -> float:
    (kind, params), = dist.items()
    if kind == "lognormal":
        mu, sigma = params
        return float(rng.lognormal(mu, sigma))
    lo, hi = params
    return float(rng.uniform(lo, hi))


def _rectangle(cx, cy, length, width, azimuth_deg):
    u = azimuth_vector(azimuth_deg)
    v = azimuth_vector(azimuth_deg + 90.0)
    c = np.array([cx, cy])
    hl, hw = 0.5 * length, 0.5 * width
    return tuple(tuple(map(float, c + a * hl * u + b * hw * v)) for a, b in ((-1, -1), (1, -1), (1, 1), (-1, 1)))


def generate_city(spec: SceneSpec) -> list[Footprint]:
    """Rectangular footprints placed by seeded rejection sampling.

    Building ``i`` draws its size, orientation, height and placement attempts
    from its own substream, so a building never changes because another one
    needed more attempts.
    """
    width = spec.width_px * spec.pixel_size_m
    height = spec.height_px * spec.pixel_size_m
    lo, hi = spec.footprint_side_range_m
    max_radius = hi / math.sqrt(2.0)
    cell = 2 * max_radius + spec.min_spacing_m
    grid: dict[tuple[int, int], list[int]] = {}
    placed: list[Footprint] = []
    radii: list[float] = []
    centers: list[tuple[float, float]] = []

    for i in range(spec.n_buildings):
        rng = substream(spec.seed, STREAM_BUILDING, i)
        a, b = rng.uniform(lo, hi), rng.uniform(lo, hi)
        length, wid = max(a, b), min(a, b)
        az = float(rng.uniform(0.0, 180.0)) if spec.random_orientation else 90.0
        h = draw_height(rng, spec.height_distribution)
        radius = 0.5 * math.hypot(length, wid)
        for _ in range(spec.max_attempts_per_building):
            if width < 2 * radius or height < 2 * radius:
                break
            cx = rng.uniform(radius, width - radius)
            cy = rng.uniform(radius, height - radius)
            ring = _rectangle(cx, cy, length, wid, az)
            gi, gj = int(cx // cell), int(cy // cell)
            ok = True
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    for k in grid.get((gi + di, gj + dj), ()):
                        ox, oy = centers[k]
                        if math.hypot(cx - ox, cy - oy) >= radius + radii[k] + spec.min_spacing_m:
                            continue
                        if polygon_distance(ring, placed[k].vertices) < spec.min_spacing_m:
                            ok = False
                            break
                    if not ok:
                        break
                if not ok:
                    break
            if ok:
                grid.setdefault((gi, gj), []).append(len(placed))
                placed.append(Footprint(f"b{i:05d}", ring, h))
                radii.append(radius)
                centers.append((cx, cy))
                break
        else:
            raise CapacityError(len(placed), spec.n_buildings)
        if len(placed) != i + 1:
            raise CapacityError(len(placed), spec.n_buildings)
    return placed


# ---------------------------------------------------------------- raster I/O


def _raster_paths(path) -> tuple[Path, Path]:
    p = Path(path)
    name = p.name
    for suffix in (".hdr.json", ".bin"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
    return p.with_name(name + ".hdr.json"), p.with_name(name + ".bin")


def write_raster(r: Raster, path, **extra) -> tuple[Path, Path]:
    hdr_path, bin_path = _raster_paths(path)
    header = {
        "width": r.width_px,
        "height": r.height_px,
        "pixel_size_m": r.pixel_size_m,
        "origin": list(r.origin),
        "band": r.band,
        "dtype": "f32le",
        "order": "row-major-north-up",
        **extra,
    }
    hdr_path.write_text(json.dumps(header, indent=1), encoding="utf-8")
    bin_path.write_bytes(r.values.astype("<f4").tobytes())
    return hdr_path, bin_path


def read_raster_header(path) -> dict:
    hdr_path, _ = _raster_paths(path)
    raw = hdr_path.read_bytes()
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        pos = getattr(exc, "pos", getattr(exc, "start", 0))
        raise RasterFormatError(f"{hdr_path}: malformed header: {exc}", pos) from exc
    for key, typ in (("width", int), ("height", int), ("pixel_size_m", (int, float)), ("origin", list), ("band", str)):
        if not isinstance(header.get(key), typ) or isinstance(header.get(key), bool):
            raise RasterFormatError(f"{hdr_path}: header field {key!r} missing or invalid", 0)
    if header.get("dtype", "f32le") != "f32le" or header.get("order", "row-major-north-up") != "row-major-north-up":
        raise RasterFormatError(f"{hdr_path}: unsupported dtype/order", 0)
    if header["width"] <= 0 or header["height"] <= 0 or header["pixel_size_m"] <= 0:
        raise RasterFormatError(f"{hdr_path}: non-positive size in header", 0)
    return header


def read_raster(path) -> Raster:
    header = read_raster_header(path)
    _, bin_path = _raster_paths(path)
    payload = bin_path.read_bytes()
    expected = header["width"] * header["height"] * 4
    if len(payload) < expected:
        raise RasterFormatError(f"{bin_path}: truncated payload, expected {expected} bytes", len(payload))
    if len(payload) > expected:
        raise RasterFormatError(f"{bin_path}: payload longer than header size {expected} bytes", expected)
    values = np.frombuffer(payload, dtype="<f4").reshape(header["height"], header["width"])
    if not np.all(np.isfinite(values)):
        bad = int(np.flatnonzero(~np.isfinite(values.ravel()))[0])
        raise RasterFormatError(f"{bin_path}: non-finite value", bad * 4)
    return Raster(values.astype(np.float32), float(header["pixel_size_m"]), tuple(header["origin"]), header["band"])
