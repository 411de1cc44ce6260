"""Direct geometric read-out of building range extents from amplitude images.

These estimators are the non-learned baseline: they locate the bright
layover band next to a known footprint and turn its range length into a
height with the same layover model the simulator uses.
"""

from __future__ import annotations

import math

import numpy as np

from .geometry import (
    Footprint,
    OrientedRect,
    Projection,
    azimuth_vector,
    convex_hull,
    heading_aligned_bbox,
    height_from_lengths,
    points_in_polygon,
)


def mask_range_extent(mask: np.ndarray, origin, pixel_size_m: float, range_az_deg: float) -> float:
    """Range-direction extent (m) of a boolean mask sampled at pixel centers.

    One pixel is added to the spread of the centers so a band of ``k``
    pixels measures ``k * pixel`` along an image axis.
    """
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return 0.0
    x = origin[0] + (cols + 0.5) * pixel_size_m
    y = origin[1] - (rows + 0.5) * pixel_size_m
    u = azimuth_vector(range_az_deg)
    proj = x * u[0] + y * u[1]
    return float(proj.max() - proj.min() + pixel_size_m)


def strip_coordinates(shape, origin, pixel_size_m, fbb: OrientedRect):
    """(u, v) offsets of every pixel center from the FBB center."""
    gx, gy = strip_grid(shape, origin, pixel_size_m)
    uv = fbb.local_coords(np.stack([gx, gy], axis=-1))
    return uv[..., 0], uv[..., 1]


def connected_from(seed: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    """4-connected part of ``allowed`` reachable from ``seed``."""
    region = seed & allowed
    while True:
        grown = region.copy()
        grown[1:] |= region[:-1]
        grown[:-1] |= region[1:]
        grown[:, 1:] |= region[:, :-1]
        grown[:, :-1] |= region[:, 1:]
        grown &= allowed
        if np.array_equal(grown, region):
            return region
        region = grown


def measure_lbbb_noiseless(
    amp: np.ndarray,
    origin,
    pixel_size_m: float,
    footprint: Footprint,
    range_az_deg: float,
    bright_threshold: float,
    max_layover_m: float,
) -> float:
    """BBB range length from a noiseless rendering.

    Bright pixels (roof or layover) connected to the footprint are kept
    inside its range strip, from the far-range edge of the FBB back toward
    the sensor by at most ``max_layover_m``. The result is their range
    extent.
    """
    fbb = heading_aligned_bbox(footprint, range_az_deg)
    arr = footprint.as_array()
    reach = max_layover_m + pixel_size_m
    x0, y0 = origin
    c0 = max(int(math.floor((arr[:, 0].min() - reach - x0) / pixel_size_m)), 0)
    c1 = min(int(math.ceil((arr[:, 0].max() + reach - x0) / pixel_size_m)), amp.shape[1])
    r0 = max(int(math.floor((y0 - arr[:, 1].max() - reach) / pixel_size_m)), 0)
    r1 = min(int(math.ceil((y0 - arr[:, 1].min() + reach) / pixel_size_m)), amp.shape[0])
    if r0 >= r1 or c0 >= c1:
        return 0.0
    win = amp[r0:r1, c0:c1]
    win_origin = (x0 + c0 * pixel_size_m, y0 - r0 * pixel_size_m)
    u, v = strip_coordinates(win.shape, win_origin, pixel_size_m, fbb)
    half_u, half_v = 0.5 * fbb.extent_u_m, 0.5 * fbb.extent_v_m
    strip = (np.abs(v) <= half_v) & (u <= half_u) & (u >= -half_u - max_layover_m)
    bright = strip & (win >= bright_threshold)
    seed = points_in_polygon(np.stack(strip_grid(win.shape, win_origin, pixel_size_m), axis=-1), footprint.vertices)
    region = connected_from(seed, bright)
    return mask_range_extent(region, win_origin, pixel_size_m, range_az_deg)


def strip_grid(shape, origin, pixel_size_m):
    h, w = shape
    xs = origin[0] + (np.arange(w) + 0.5) * pixel_size_m
    ys = origin[1] - (np.arange(h) + 0.5) * pixel_size_m
    return np.meshgrid(xs, ys)


def estimate_height_noiseless(
    amp: np.ndarray,
    origin,
    pixel_size_m: float,
    footprint: Footprint,
    range_az_deg: float,
    incidence_deg: float,
    bright_threshold: float,
    max_layover_m: float,
    projection: Projection | str = Projection.COS,
) -> float:
    lbbb = measure_lbbb_noiseless(
        amp, origin, pixel_size_m, footprint, range_az_deg, bright_threshold, max_layover_m
    )
    lfbb = heading_aligned_bbox(footprint, range_az_deg).extent_u_m
    return height_from_lengths(lbbb, lfbb, incidence_deg, projection)[0]


def layover_depth(points: np.ndarray, ring, range_az_deg: float) -> np.ndarray:
    """Distance each point must travel along the range axis to enter the footprint.

    A point at depth ``d`` is covered by the layover band of any building
    whose layover length is at least ``d``. Points inside the footprint get
    depth 0 and points the band can never reach get ``inf``. The footprint
    is replaced by its convex hull.
    """
    hull = np.asarray(convex_hull(ring))
    pts = np.asarray(points, dtype=np.float64)
    u = azimuth_vector(range_az_deg)
    edge = np.roll(hull, -1, axis=0) - hull
    # outward normals of a counter-clockwise ring
    normal = np.stack([edge[:, 1], -edge[:, 0]], axis=1)
    offset = np.einsum("ij,ij->i", normal, hull)
    nu = normal @ u
    npnt = pts @ normal.T - offset  # <= 0 inside each half-plane
    t_lo = np.zeros(pts.shape[:-1])
    t_hi = np.full(pts.shape[:-1], np.inf)
    ok = np.ones(pts.shape[:-1], dtype=bool)
    for i in range(len(hull)):
        if nu[i] < 0:
            t_lo = np.maximum(t_lo, -npnt[..., i] / nu[i])
        elif nu[i] > 0:
            t_hi = np.minimum(t_hi, -npnt[..., i] / nu[i])
        else:
            ok &= npnt[..., i] <= 0
    return np.where(ok & (t_lo <= t_hi), t_lo, np.inf)


def changepoint_depth(depth: np.ndarray, values: np.ndarray) -> float:
    """Layover length from pixel depths and amplitudes.

    Pixels sorted by depth are split into a near (bright) and a far (dark)
    group so the two-level step fit has the least squared error. Returns
    the midpoint between the last bright depth and the first dark one.
    """
    order = np.argsort(depth, kind="stable")
    d = depth[order]
    v = values[order]
    n = len(d)
    if n < 2:
        return 0.0
    cs = np.cumsum(v)
    cq = np.cumsum(v * v)
    k = np.arange(1, n)
    # only split between distinct depths
    valid = d[1:] > d[:-1]
    left_n, right_n = k, n - k
    left_s, right_s = cs[:-1], cs[-1] - cs[:-1]
    left_mean, right_mean = left_s / left_n, right_s / right_n
    cost = (cq[:-1] - left_s * left_mean) + ((cq[-1] - cq[:-1]) - right_s * right_mean)
    valid &= left_mean > right_mean
    total = cq[-1] - cs[-1] ** 2 / n
    if not valid.any() or cost[valid].min() >= total:
        return 0.0
    best = np.flatnonzero(valid)[np.argmin(cost[valid])]
    return 0.5 * (d[best] + d[best + 1])


def measure_lbbb_chip(
    chip: np.ndarray,
    pixel_size_m: float,
    footprint_local,
    range_az_deg: float,
    center_offset=(0.0, 0.0),
    max_layover_m: float | None = None,
) -> float:
    """BBB range length from a (possibly speckled) chip centered on the FBB.

    ``footprint_local`` holds the footprint vertices relative to the FBB
    center and ``center_offset`` is the FBB center minus the chip center,
    both in meters (east, north).
    """
    s = chip.shape[0]
    half = 0.5 * s * pixel_size_m
    xs = -half + (np.arange(s) + 0.5) * pixel_size_m - center_offset[0]
    ys = half - (np.arange(s) + 0.5) * pixel_size_m - center_offset[1]
    gx, gy = np.meshgrid(xs, ys)
    depth = layover_depth(np.stack([gx, gy], axis=-1), footprint_local, range_az_deg)
    if max_layover_m is None:
        max_layover_m = half
    sel = (depth > 0) & (depth <= max_layover_m)
    length = changepoint_depth(depth[sel], chip[sel])
    fbb = heading_aligned_bbox(footprint_local, range_az_deg)
    return fbb.extent_u_m + length
