"""Small rendered sample sets shared by several test modules."""

from functools import lru_cache

from sarheight.geometry import AcquisitionGeometry
from sarheight.pipeline import build_city_samples
from sarheight.scene_sim import SceneSpec, generate_city, render_amplitude


def scene(seed=3, n=40, extent=400.0, speckle="off", incidence=30.0, latitude=45.0, spacing=10.0):
    geom = AcquisitionGeometry(incidence_deg=incidence, latitude_deg=latitude)
    return SceneSpec(
        seed=seed,
        extent_m=(extent, extent),
        geom=geom,
        n_buildings=n,
        footprint_side_range_m=(8, 30),
        min_spacing_m=spacing,
        speckle=speckle,
    )


@lru_cache(maxsize=None)
def rendered_samples(seed=3, n=40, chip_px=32, speckle="off"):
    spec = scene(seed=seed, n=n, speckle=speckle)
    city = generate_city(spec)
    amp = render_amplitude(city, spec)
    return tuple(build_city_samples(amp, city, spec.geom, f"S{seed}", chip_px=chip_px))
