"""End-to-end acceptance checks; each test records one AC line in the run summary."""

import math
import time

import numpy as np
import pytest

from fixtures import rendered_samples
from oracles import finite_difference_grads, random_convex_polygon, sweep_min_rect_area, two_pass_stratified
from sarheight.eval import EvalPair, MetricsReport, format_table, parse_table, stratified_report
from sarheight.geometry import (
    AcquisitionGeometry,
    OrientedRect,
    heading_aligned_bbox,
    height_from_boxes,
    min_enclosing_rect,
    project_bbb,
    range_azimuth,
)
from sarheight.measure import estimate_height_noiseless, measure_lbbb_chip
from sarheight.pipeline import build_city_samples, deduplicate, extract_samples, split_ratio, tile, tile_positions
from sarheight.regressor import (
    ModelConfig,
    TrainHyper,
    batch_arrays,
    forward,
    init,
    loss_and_gradients,
    mse_loss,
    predict_heights,
    train,
)
from sarheight.scene_sim import Raster, SceneSpec, generate_city, render_amplitude


def test_ac1_analytic_round_trip(criterion):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(10_000):
        theta = rng.uniform(15, 60)
        geom = AcquisitionGeometry(incidence_deg=theta, heading_override_deg=rng.uniform(0, 360))
        fbb = OrientedRect(tuple(rng.uniform(-1e4, 1e4, 2)), rng.uniform(2, 200), rng.uniform(2, 200), range_azimuth(geom))
        h = rng.uniform(0.5, 300)
        back = height_from_boxes(fbb, project_bbb(fbb, h, geom), geom)
        worst = max(worst, abs(back - h) / h)
    dt = time.perf_counter() - t0
    ok = worst <= 1e-9 and dt < 5
    assert criterion(1, ok, f"round trip 10000 triples: max rel err {worst:.2e} (<= 1e-9), {dt:.2f} s (< 5 s)")


def test_ac2_geometric_oracle_on_rendered_scenes(criterion):
    t0 = time.perf_counter()
    worst_ratio, details = 0.0, []
    extent = 2600.0
    for theta in (25.0, 30.0, 45.0):
        geom = AcquisitionGeometry(incidence_deg=theta, latitude_deg=45.0)
        spec = SceneSpec(
            seed=int(theta), extent_m=(extent, extent), geom=geom, pixel_size_m=2.5,
            n_buildings=230, min_spacing_m=100.0, random_orientation=True,
        )
        city = generate_city(spec)
        amp = render_amplitude(city, spec)
        raz = range_azimuth(geom)

        def fully_imaged(b):
            c = np.array(project_bbb(heading_aligned_bbox(b, raz), b.height_m, geom).corners())
            return c.min() >= 0 and c.max() <= extent

        chosen = [b for b in city if fully_imaged(b)][:200]
        assert len(chosen) == 200
        bright = 0.5 * (spec.background_amp + spec.roof_amp)
        err = np.array([
            abs(estimate_height_noiseless(amp.values, amp.origin, 2.5, b, raz, theta, bright, 250.0) - b.height_m)
            for b in chosen
        ])
        tol = 2 * spec.pixel_size_m / math.cos(math.radians(theta))
        worst_ratio = max(worst_ratio, err.max() / tol)
        details.append(f"θ={theta:g}: max {err.max():.2f} m / tol {tol:.2f} m")
    dt = time.perf_counter() - t0
    ok = worst_ratio <= 1 and dt < 60
    assert criterion(2, ok, "; ".join(details) + f"; {dt:.1f} s (< 60 s)")


def test_ac3_min_rect_vs_sweep(criterion):
    rng = np.random.default_rng(3)
    worst_area, worst_out = 0.0, 0.0
    for _ in range(100):
        poly = random_convex_polygon(rng, n_points=int(rng.integers(5, 20)), radius=rng.uniform(1, 100))
        rect = min_enclosing_rect(poly)
        oracle_area, _ = sweep_min_rect_area(poly)
        worst_area = max(worst_area, abs(rect.area_m2 - oracle_area) / oracle_area)
        uv = rect.local_coords(np.asarray(poly))
        excess = np.maximum(np.abs(uv) - [rect.extent_u_m / 2, rect.extent_v_m / 2], 0).max()
        worst_out = max(worst_out, float(excess))
    ok = worst_area <= 0.005 and worst_out <= 1e-9
    assert criterion(3, ok, f"100 convex polygons: max area diff {worst_area:.2e} (<= 0.5%), max outside {worst_out:.1e} m (<= 1e-9)")


def test_ac4_tiling(criterion):
    rng = np.random.default_rng(4)
    ok = True
    for _ in range(25):
        h, w = (int(v) for v in rng.integers(256, 2049, 2))
        r = Raster(np.zeros((h, w), np.float32), 1.0, (0.0, float(h)))
        cover = np.zeros((h, w), np.int16)
        for p in tile(r):
            r0, c0 = p.origin_px
            cover[r0 : r0 + 256, c0 : c0 + 256] += 1
        ok &= cover.min() >= 1
        for pos in (tile_positions(h, 256, 204), tile_positions(w, 256, 204)):
            regular = [q for q in pos if q % 204 == 0]
            ok &= all(a + 256 - b == 52 for a, b in zip(regular, regular[1:]))
    assert criterion(4, ok, "25 random rasters 256-2048 px: full coverage, regular overlap 52 px")


def test_ac5_dedup(criterion):
    from test_pipeline import GEOM, four_patch_fixture

    r, fps = four_patch_fixture()
    raw = [s for p in tile(r) for s in extract_samples(p, fps, GEOM, chip_px=16, city_id="A")]
    counts = {}
    for s in raw:
        counts[s.building_id] = counts.get(s.building_id, 0) + 1
    out = deduplicate(raw)
    ok = (
        len(counts) == 50
        and set(counts.values()) <= {2, 3, 4}
        and len(out) == 50
        and [s.building_id for s in deduplicate(out)] == [s.building_id for s in out]
    )
    assert criterion(5, ok, f"{len(raw)} raw samples of {len(counts)} buildings -> {len(out)}; idempotent")


def test_ac6_gradient_check(criterion):
    worst = 0.0
    for seed in range(6):
        rng = np.random.default_rng(600 + seed)
        cfg = ModelConfig(
            chip_px=int(rng.integers(6, 11)),
            conv_layers=((int(rng.integers(2, 4)), 3, int(rng.integers(1, 3))), (int(rng.integers(2, 5)), 3, 1)),
            fc_widths=(int(rng.integers(3, 6)), 1),
            seed=seed,
        )
        st = init(cfg)
        for name in st.params:
            if name.endswith(".b"):
                st.params[name][:] = rng.uniform(0.05, 0.2, size=st.params[name].shape)
        chips = rng.uniform(0, 3, size=(3, 2, cfg.chip_px, cfg.chip_px))
        feats = rng.uniform([5, 5, 0.5], [30, 30, 0.9], size=(3, 3))
        targets = rng.uniform(10, 60, size=3)
        _, grads = loss_and_gradients(st, (chips, feats), targets)
        fd = finite_difference_grads(lambda: mse_loss(forward(st, (chips, feats)), targets), st.params, eps=1e-5)
        for name in grads:
            a, b = grads[name], fd[name]
            worst = max(worst, float((np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)).max()))
    assert criterion(6, worst < 1e-4, f"6 random configs, 64-bit: max rel err {worst:.2e} (< 1e-4)")


@pytest.mark.slow
def test_ac7_overfit(criterion):
    samples = list(rendered_samples(chip_px=64))[:32]
    assert len(samples) == 32
    t0 = time.perf_counter()
    # one batch holds all 32 samples, so each step's loss is the full training MSE
    st = train(
        init(ModelConfig(chip_px=64, seed=0)), samples, TrainHyper(epochs=2000, max_steps=2000),
        callback=lambda s, _: s.loss_history[-1] < 0.05,
    )
    chips, feats, targets = batch_arrays(samples)
    final = mse_loss(forward(st, (chips, feats)), targets)
    dt = time.perf_counter() - t0
    ok = final < 0.5 and len(st.loss_history) <= 2000 and dt < 120
    assert criterion(7, ok, f"32 samples, {len(st.loss_history)} steps: train MSE {final:.3f} m² (< 0.5), {dt:.0f} s (< 120 s)")


@pytest.mark.slow
def test_ac8_desk_benchmark(criterion):
    t0 = time.perf_counter()
    geom = AcquisitionGeometry(incidence_deg=30.0, latitude_deg=45.0)
    spec = SceneSpec(
        seed=1, extent_m=(5000.0, 5000.0), geom=geom, n_buildings=6100,
        footprint_side_range_m=(8, 30), min_spacing_m=10.0, speckle="single_look",
    )
    city = generate_city(spec)
    amp = render_amplitude(city, spec)
    samples = build_city_samples(amp, city, geom, "bench", chip_px=64)
    assert len(samples) >= 6000
    train_s, test_s = split_ratio(samples[:6000], 5000 / 6000, seed=0)
    assert (len(train_s), len(test_s)) == (5000, 1000)
    ref = np.array([s.ref_height_m for s in test_s])

    oracle = []
    for s in test_s:
        lbbb = measure_lbbb_chip(s.chip_amp, s.pixel_size_m, s.footprint_local, s.range_azimuth_deg, s.chip_center_offset_m)
        oracle.append(max(0.0, lbbb - s.fbb_extent_u_m) / s.cos_theta)
    oracle_mae = float(np.abs(np.array(oracle) - ref).mean())

    st = train(init(ModelConfig(chip_px=64, seed=0)), train_s, TrainHyper(epochs=30, seed=0))
    learned_mae = float(np.abs(predict_heights(st, test_s) - ref).mean())
    dt = time.perf_counter() - t0
    ok = learned_mae <= 8.0 and learned_mae <= 2 * oracle_mae and dt < 600
    assert criterion(
        8, ok,
        f"5000/1000 speckled: learned MAE {learned_mae:.2f} m (<= 8, <= 2 x oracle {oracle_mae:.2f}), {dt:.0f} s (< 600 s)",
    )


def test_ac9_protocol_reproduction(criterion, tmp_path):
    from test_cli import run_all, small_config

    config = small_config(tmp_path)
    run_all(config)
    text = (tmp_path / "run" / "report.txt").read_text()
    header = "City MAE(∀h) MAE(h<40) MAE(h≥40) RMSE(∀h) RMSE(h<40) RMSE(h≥40)"
    rows = parse_table(text)
    milan = MetricsReport("Milan", 1, 2.26, 3.67, 1, 2.25, 3.61, 1, 37.91, 39.01)
    milan_row = format_table([milan]).splitlines()[1]
    ok = (
        [label for label, _ in rows] == ["A", "B", "C", "In-Distribution (70-30)"]
        and all(len(v) == 6 for _, v in rows)
        and text.count(header) == 2
        and milan_row == "Milan 2.26 2.25 37.91 3.67 3.61 39.01"
    )
    assert criterion(9, ok, "3 leave-one-city-out rows + In-Distribution (70-30) row; Milan row renders exactly")


def test_ac10_metric_oracle(criterion, tmp_path):
    rng = np.random.default_rng(10)
    refs = rng.uniform(0, 120, 1000)
    preds = np.clip(refs + rng.normal(0, 10, 1000), 0, None)
    pairs = [EvalPair(f"b{i}", "X", r, p) for i, (r, p) in enumerate(zip(refs, preds))]
    rep = stratified_report(pairs)
    want = two_pass_stratified(refs, preds)
    got = {"all": (rep.n_all, rep.mae_all, rep.rmse_all), "lt": (rep.n_lt40, rep.mae_lt40, rep.rmse_lt40), "ge": (rep.n_ge40, rep.mae_ge40, rep.rmse_ge40)}
    worst = max(
        max(abs(got[k][1] - want[k][1]) / want[k][1], abs(got[k][2] - want[k][2]) / want[k][2]) for k in got
    )
    counts_ok = all(got[k][0] == want[k][0] for k in got)
    jensen = True
    for _ in range(200):
        n = int(rng.integers(1, 50))
        r = rng.uniform(0, 100, n)
        p = np.clip(r + rng.normal(0, 15, n), 0, None)
        rp = stratified_report([EvalPair(str(i), "Y", a, b) for i, (a, b) in enumerate(zip(r, p))])
        for m, s in ((rp.mae_all, rp.rmse_all), (rp.mae_lt40, rp.rmse_lt40), (rp.mae_ge40, rp.rmse_ge40)):
            if m is not None:
                jensen &= s >= m * (1 - 1e-12)
    ok = worst <= 1e-9 and counts_ok and jensen
    assert criterion(10, ok, f"1000 pairs: max rel diff vs two-pass {worst:.1e} (<= 1e-9); RMSE >= MAE in 200 reports")
