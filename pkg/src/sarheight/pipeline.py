"""Rasters and footprints to per-building samples and dataset splits."""

from __future__ import annotations

import json
import math
import zlib
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import (
    AcquisitionGeometry,
    Footprint,
    GeometryError,
    OrientedRect,
    Projection,
    heading_aligned_bbox,
    project_bbb,
    range_azimuth,
)
from .scene_sim import Raster, rasterize_polygons

DEDUP_CENTROID_Q_M = 0.5
DEDUP_AREA_Q_M2 = 0.5
NORM_CLIP = 8.0


class PipelineError(ValueError):
    pass


class UnknownCityError(PipelineError):
    pass


@dataclass(frozen=True, eq=False)
class Patch:
    origin_px: tuple[int, int]
    size_px: int
    amp: np.ndarray
    source: Raster
    truth: np.ndarray | None = None
    padded: bool = False

    def contains_pixel(self, row: int, col: int) -> bool:
        r0, c0 = self.origin_px
        return (
            r0 <= row < min(r0 + self.size_px, self.source.height_px)
            and c0 <= col < min(c0 + self.size_px, self.source.width_px)
        )


def tile_positions(dim: int, patch_px: int, stride: int) -> list[int]:
    if dim <= patch_px:
        return [0]
    pos = list(range(0, dim - patch_px + 1, stride))
    if pos[-1] != dim - patch_px:
        pos.append(dim - patch_px)
    return pos


def tile_stride(patch_px: int, overlap: float) -> int:
    if not 0 <= overlap < 1:
        raise PipelineError("overlap must lie in [0, 1)")
    return max(1, int(math.floor(patch_px * (1.0 - overlap))))


def _window(values: np.ndarray, r0: int, c0: int, size: int) -> tuple[np.ndarray, bool]:
    win = values[r0 : r0 + size, c0 : c0 + size]
    if win.shape == (size, size):
        return win, False
    out = np.zeros((size, size), dtype=values.dtype)
    out[: win.shape[0], : win.shape[1]] = win
    return out, True


def tile(raster: Raster, patch_px: int = 256, overlap: float = 0.2, truth: Raster | None = None) -> list[Patch]:
    """Overlapping square patches; rasters smaller than a patch are zero-padded south/east."""
    if patch_px <= 0:
        raise PipelineError("patch_px must be > 0")
    if truth is not None and truth.values.shape != raster.values.shape:
        raise PipelineError("truth raster does not match the amplitude raster")
    stride = tile_stride(patch_px, overlap)
    patches = []
    for r0 in tile_positions(raster.height_px, patch_px, stride):
        for c0 in tile_positions(raster.width_px, patch_px, stride):
            amp, padded = _window(raster.values, r0, c0, patch_px)
            tr = None if truth is None else _window(truth.values, r0, c0, patch_px)[0]
            patches.append(Patch((r0, c0), patch_px, amp, raster, tr, padded))
    return patches


# ---------------------------------------------------------------- samples


@dataclass(eq=False)
class BuildingSample:
    building_id: str
    city_id: str
    chip_amp: np.ndarray
    chip_mask: np.ndarray
    fbb_extent_u_m: float
    fbb_extent_v_m: float
    cos_theta: float
    target_lbbb_m: float
    ref_height_m: float
    patch_origin: tuple[int, int] = (0, 0)
    truncated: bool = False
    centroid: tuple[float, float] = (0.0, 0.0)
    area_m2: float = 0.0
    range_azimuth_deg: float = 0.0
    pixel_size_m: float = 1.0
    chip_center_offset_m: tuple[float, float] = (0.0, 0.0)
    projection: str = "cos"
    footprint_local: tuple = ()

    @property
    def features(self) -> np.ndarray:
        return np.array([self.fbb_extent_u_m, self.fbb_extent_v_m, self.cos_theta])

    @property
    def mask_count(self) -> int:
        return int(np.count_nonzero(self.chip_mask))


class FootprintIndex:
    """FBBs of a city with the source pixel holding each FBB center."""

    def __init__(self, footprints: Sequence[Footprint], source: Raster, geom: AcquisitionGeometry):
        self.range_az = range_azimuth(geom)
        self.footprints: list[Footprint] = []
        self.fbbs: list[OrientedRect] = []
        self.skipped = 0
        rows, cols = [], []
        for f in footprints:
            try:
                fbb = heading_aligned_bbox(f, self.range_az)
            except GeometryError:
                self.skipped += 1
                continue
            self.footprints.append(f)
            self.fbbs.append(fbb)
            r, c = source.pixel_of(*fbb.center)
            rows.append(r)
            cols.append(c)
        self.rows = np.asarray(rows, dtype=np.int64)
        self.cols = np.asarray(cols, dtype=np.int64)

    def in_patch(self, patch: Patch) -> np.ndarray:
        r0, c0 = patch.origin_px
        r1 = min(r0 + patch.size_px, patch.source.height_px)
        c1 = min(c0 + patch.size_px, patch.source.width_px)
        sel = (self.rows >= r0) & (self.rows < r1) & (self.cols >= c0) & (self.cols < c1)
        return np.flatnonzero(sel)


def normalize_chip(chip: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Divide by the chip median (background estimate) and clip to [0, 8]."""
    vals = chip[valid]
    med = float(np.median(vals)) if vals.size else 0.0
    if not med > 0:
        med = 1.0
    return np.clip(chip / med, 0.0, NORM_CLIP)


def extract_chip(source: Raster, center_xy, chip_px: int):
    """Chip of ``source`` centered on a map point; returns (chip, valid, chip origin)."""
    p = source.pixel_size_m
    x0, y0 = source.origin
    top = int(math.floor((y0 - center_xy[1]) / p - 0.5 * chip_px + 0.5))
    left = int(math.floor((center_xy[0] - x0) / p - 0.5 * chip_px + 0.5))
    chip = np.zeros((chip_px, chip_px), dtype=np.float64)
    valid = np.zeros((chip_px, chip_px), dtype=bool)
    sr0, sr1 = max(top, 0), min(top + chip_px, source.height_px)
    sc0, sc1 = max(left, 0), min(left + chip_px, source.width_px)
    if sr0 < sr1 and sc0 < sc1:
        chip[sr0 - top : sr1 - top, sc0 - left : sc1 - left] = source.values[sr0:sr1, sc0:sc1]
        valid[sr0 - top : sr1 - top, sc0 - left : sc1 - left] = True
    origin = (x0 + left * p, y0 - top * p)
    return chip, valid, origin


def extract_samples(
    patch: Patch,
    footprints,
    geom: AcquisitionGeometry,
    chip_px: int = 128,
    city_id: str = "",
    projection: Projection | str = Projection.COS,
    stats: Counter | None = None,
) -> list[BuildingSample]:
    """One sample per footprint whose FBB center falls inside the patch.

    ``footprints`` is a :class:`FootprintIndex` or a plain sequence. Skipped
    buildings (degenerate outlines, empty masks) are tallied in ``stats``.
    """
    index = footprints if isinstance(footprints, FootprintIndex) else FootprintIndex(footprints, patch.source, geom)
    if stats is not None and not isinstance(footprints, FootprintIndex):
        stats["degenerate"] += index.skipped
    source = patch.source
    p = source.pixel_size_m
    proj = Projection(projection).value
    out = []
    for k in index.in_patch(patch):
        f, fbb = index.footprints[k], index.fbbs[k]
        chip, valid, origin = extract_chip(source, fbb.center, chip_px)
        mask = rasterize_polygons([f.vertices], (chip_px, chip_px), origin, p)
        if not mask.any():
            if stats is not None:
                stats["empty_mask"] += 1
            continue
        arr = f.as_array()
        truncated = bool(
            arr[:, 0].min() < origin[0]
            or arr[:, 0].max() > origin[0] + chip_px * p
            or arr[:, 1].max() > origin[1]
            or arr[:, 1].min() < origin[1] - chip_px * p
        )
        chip_center = (origin[0] + 0.5 * chip_px * p, origin[1] - 0.5 * chip_px * p)
        bbb = project_bbb(fbb, f.height_m, geom, proj)
        out.append(
            BuildingSample(
                building_id=f.id,
                city_id=city_id,
                chip_amp=normalize_chip(chip, valid),
                chip_mask=mask.astype(np.float64),
                fbb_extent_u_m=fbb.extent_u_m,
                fbb_extent_v_m=fbb.extent_v_m,
                cos_theta=geom.cos_theta,
                target_lbbb_m=bbb.extent_u_m,
                ref_height_m=f.height_m,
                patch_origin=tuple(patch.origin_px),
                truncated=truncated,
                centroid=f.centroid,
                area_m2=f.area_m2,
                range_azimuth_deg=index.range_az,
                pixel_size_m=p,
                chip_center_offset_m=(fbb.center[0] - chip_center[0], fbb.center[1] - chip_center[1]),
                projection=proj,
                footprint_local=tuple((x - fbb.center[0], y - fbb.center[1]) for x, y in f.vertices),
            )
        )
    return out


def _quantize(value: float, step: float) -> int:
    return int(math.floor(value / step + 0.5))


def dedup_key(s: BuildingSample) -> tuple:
    return (
        s.city_id,
        _quantize(s.centroid[0], DEDUP_CENTROID_Q_M),
        _quantize(s.centroid[1], DEDUP_CENTROID_Q_M),
        _quantize(s.area_m2, DEDUP_AREA_Q_M2),
    )


def deduplicate(samples: Iterable[BuildingSample]) -> list[BuildingSample]:
    """Keep one sample per building, identified by quantized centroid and area.

    Preference: mask fully inside the chip, then the larger mask, then the
    lexicographically smallest patch origin.
    """
    best: dict[tuple, BuildingSample] = {}
    for s in samples:
        key = dedup_key(s)
        rank = (s.truncated, -s.mask_count, tuple(s.patch_origin))
        cur = best.get(key)
        if cur is None or rank < (cur.truncated, -cur.mask_count, tuple(cur.patch_origin)):
            best[key] = s
    return sorted(best.values(), key=lambda s: (s.city_id, s.building_id))


def _city_rng(seed: int, city: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(zlib.crc32(city.encode()),)))


def _group_by_city(samples: Sequence[BuildingSample]) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = {}
    for i, s in enumerate(samples):
        groups.setdefault(s.city_id, []).append(i)
    return groups


def _proportional_counts(sizes: Sequence[int], n: int) -> list[int]:
    total = sum(sizes)
    quotas = [n * s / total for s in sizes]
    counts = [min(int(q), s) for q, s in zip(quotas, sizes)]
    order = sorted(range(len(sizes)), key=lambda i: (-(quotas[i] - int(quotas[i])), i))
    left = n - sum(counts)
    for i in order * 2:
        if left == 0:
            break
        if counts[i] < sizes[i]:
            counts[i] += 1
            left -= 1
    return counts


def subsample_city(
    samples: Sequence[BuildingSample],
    n: int = 20000,
    seed: int = 0,
    strata_edges_m: Sequence[float] | None = None,
) -> list[BuildingSample]:
    """Uniform per-city subsample without replacement; input order is preserved.

    With ``strata_edges_m`` the draw is stratified by reference height with
    proportional allocation.
    """
    keep: list[int] = []
    for city, idx in _group_by_city(samples).items():
        if len(idx) <= n:
            keep.extend(idx)
            continue
        rng = _city_rng(seed, city)
        if strata_edges_m is None:
            chosen = rng.choice(len(idx), size=n, replace=False)
            keep.extend(idx[i] for i in chosen)
            continue
        bins = np.digitize([samples[i].ref_height_m for i in idx], strata_edges_m)
        strata = [[idx[j] for j in np.flatnonzero(bins == b)] for b in range(len(strata_edges_m) + 1)]
        for members, k in zip(strata, _proportional_counts([len(m) for m in strata], n)):
            if k:
                keep.extend(members[i] for i in rng.choice(len(members), size=k, replace=False))
    return [samples[i] for i in sorted(keep)]


def split_loco(samples: Sequence[BuildingSample], held_out_city: str):
    test = [s for s in samples if s.city_id == held_out_city]
    if not test:
        raise UnknownCityError(f"no samples for held-out city {held_out_city!r}")
    train = [s for s in samples if s.city_id != held_out_city]
    return train, test


def split_ratio(samples: Sequence[BuildingSample], train_frac: float = 0.7, seed: int = 0):
    if not 0 < train_frac < 1:
        raise PipelineError("train_frac must lie strictly inside (0, 1)")
    n = len(samples)
    perm = np.random.default_rng(seed).permutation(n)
    k = int(math.floor(train_frac * n + 0.5))
    train_idx = sorted(perm[:k])
    test_idx = sorted(perm[k:])
    return [samples[i] for i in train_idx], [samples[i] for i in test_idx]


def build_city_samples(
    amp: Raster,
    footprints: Sequence[Footprint],
    geom: AcquisitionGeometry,
    city_id: str,
    patch_px: int = 256,
    overlap: float = 0.2,
    chip_px: int = 128,
    projection: Projection | str = Projection.COS,
    stats: Counter | None = None,
) -> list[BuildingSample]:
    """Tile a city raster, extract per-building samples from every patch, deduplicate."""
    index = FootprintIndex(footprints, amp, geom)
    if stats is not None:
        stats["degenerate"] += index.skipped
    raw = []
    for patch in tile(amp, patch_px, overlap):
        raw.extend(extract_samples(patch, index, geom, chip_px, city_id, projection, stats))
    if stats is not None:
        stats["raw"] += len(raw)
    return deduplicate(raw)


# ---------------------------------------------------------------- sample-set files

_SAMPLE_SCALARS = ("fbb_extent_u_m", "fbb_extent_v_m", "cos_theta", "target_lbbb_m", "ref_height_m")


def _sample_paths(path) -> tuple[Path, Path]:
    p = Path(path)
    name = p.name
    for suffix in (".json", ".bin"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
    return p.with_name(name + ".json"), p.with_name(name + ".bin")


def write_sample_set(path, samples: Sequence[BuildingSample], city_id: str, chip_px: int, **extra):
    json_path, bin_path = _sample_paths(path)
    entries = []
    chunks = []
    offset = 0
    for s in samples:
        if s.chip_amp.shape != (chip_px, chip_px):
            raise PipelineError(f"sample {s.building_id}: chip shape {s.chip_amp.shape} != {chip_px}")
        entry = {"building_id": s.building_id, **{k: getattr(s, k) for k in _SAMPLE_SCALARS}, "chip_offset": offset}
        entry.update(
            city_id=s.city_id,
            patch_origin=list(s.patch_origin),
            truncated=s.truncated,
            centroid=list(s.centroid),
            area_m2=s.area_m2,
            range_azimuth_deg=s.range_azimuth_deg,
            pixel_size_m=s.pixel_size_m,
            chip_center_offset_m=list(s.chip_center_offset_m),
            projection=s.projection,
            footprint_local=[list(v) for v in s.footprint_local],
        )
        entries.append(entry)
        block = np.concatenate([s.chip_amp.ravel(), s.chip_mask.ravel()]).astype("<f4").tobytes()
        chunks.append(block)
        offset += len(block)
    doc = {"city_id": city_id, "chip_px": chip_px, **extra, "samples": entries}
    json_path.write_text(json.dumps(doc, indent=1), encoding="utf-8")
    bin_path.write_bytes(b"".join(chunks))
    return json_path, bin_path


def read_sample_set(path) -> tuple[dict, list[BuildingSample]]:
    json_path, bin_path = _sample_paths(path)
    doc = json.loads(json_path.read_text(encoding="utf-8"))
    chip_px = int(doc["chip_px"])
    payload = bin_path.read_bytes()
    block = 2 * chip_px * chip_px * 4
    out = []
    for e in doc["samples"]:
        off = int(e["chip_offset"])
        if off + block > len(payload):
            raise PipelineError(f"{bin_path}: truncated chip for {e['building_id']} at byte {off}")
        arr = np.frombuffer(payload, dtype="<f4", count=2 * chip_px * chip_px, offset=off).astype(np.float64)
        amp = arr[: chip_px * chip_px].reshape(chip_px, chip_px)
        mask = arr[chip_px * chip_px :].reshape(chip_px, chip_px)
        out.append(
            BuildingSample(
                building_id=e["building_id"],
                city_id=e.get("city_id", doc["city_id"]),
                chip_amp=amp,
                chip_mask=mask,
                **{k: float(e[k]) for k in _SAMPLE_SCALARS},
                patch_origin=tuple(e.get("patch_origin", (0, 0))),
                truncated=bool(e.get("truncated", False)),
                centroid=tuple(e.get("centroid", (0.0, 0.0))),
                area_m2=float(e.get("area_m2", 0.0)),
                range_azimuth_deg=float(e.get("range_azimuth_deg", 0.0)),
                pixel_size_m=float(e.get("pixel_size_m", 1.0)),
                chip_center_offset_m=tuple(e.get("chip_center_offset_m", (0.0, 0.0))),
                projection=e.get("projection", "cos"),
                footprint_local=tuple(tuple(v) for v in e.get("footprint_local", ())),
            )
        )
    return doc, out
