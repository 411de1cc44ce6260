import json

import pytest

from sarheight import cli
from sarheight.eval import parse_table, read_metrics_csv


def small_config(tmp_path, **over):
    cities = []
    for i, (name, theta) in enumerate((("A", 30.0), ("B", 35.0), ("C", 40.0))):
        cities.append({
            "name": name,
            "geometry": {"incidence_deg": theta, "latitude_deg": 40.0 + i},
            "scene": {
                "extent_m": [300.0, 300.0],
                "n_buildings": 25,
                "min_spacing_m": 10.0,
                "speckle": "single_look",
                "height_distribution": {"lognormal": [3.0, 0.6]},
            },
        })
    cfg = {
        "seed": 11,
        "cities": cities,
        "pipeline": {"chip_px": 16, "patch_px": 64},
        "model": {"conv_layers": [[4, 3, 2], [8, 3, 2]], "fc_widths": [8, 1]},
        "training": {"epochs": 2, "batch_size": 16},
        "output_dir": str(tmp_path / "run"),
    }
    cfg.update(over)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def run_all(config, *extra):
    for cmd in cli.COMMANDS:
        code = cli.main([cmd, "--config", str(config), "--threads", "1", *extra])
        assert code == 0, cmd


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    config = small_config(tmp)
    run_all(config)
    return tmp, config


def test_report_structure(full_run):
    tmp, _ = full_run
    text = (tmp / "run" / "report.txt").read_text()
    assert "Out-of-Distribution (leave-one-city-out)" in text
    rows = parse_table(text)
    labels = [label for label, _ in rows]
    assert labels == ["A", "B", "C", "In-Distribution (70-30)"]
    assert "loco-C: train A, B; test C" in text
    meta = json.loads((tmp / "run" / "report.json").read_text())
    loco_c = next(m for m in meta["experiments"] if m["experiment"] == "loco-C")
    assert loco_c["train_cities"] == ["A", "B"] and loco_c["test_cities"] == ["C"]
    for r in read_metrics_csv(tmp / "run" / "report_metrics.csv"):
        if r.mae_all is not None:
            assert r.rmse_all >= r.mae_all


def test_outputs_carry_config_hash(full_run):
    tmp, config = full_run
    h = cli.config_hash(cli.load_config(config))
    run = tmp / "run"
    assert json.loads((run / "cities" / "A" / "footprints.json").read_text())["config_hash"] == h
    assert json.loads((run / "cities" / "A" / "amplitude.hdr.json").read_text())["config_hash"] == h
    assert json.loads((run / "datasets" / "B.json").read_text())["config_hash"] == h
    assert json.loads((run / "experiments" / "loco-A" / "model.json").read_text())["config_hash"] == h
    for csv_path in ("experiments/loco-A/loss.csv", "experiments/loco-A/predictions.csv", "experiments/ratio-70/metrics.csv", "density.csv", "report_metrics.csv"):
        assert (run / csv_path).read_text().splitlines()[0] == f"# config_hash {h}"


def test_rerun_is_bit_identical(full_run, tmp_path):
    tmp, _ = full_run
    config = small_config(tmp_path)
    run_all(config)
    for rel in ("report_metrics.csv", "experiments/ratio-70/metrics.csv", "experiments/loco-B/model.bin", "datasets/A.bin"):
        assert (tmp / "run" / rel).read_bytes() == (tmp_path / "run" / rel).read_bytes(), rel


def test_stale_artifact(full_run, tmp_path):
    tmp, config = full_run
    code = cli.main(["train", "--config", str(config), "--set", "training.lr=0.01"])
    assert code == cli.EXIT_MISSING


def test_missing_input_and_config_errors(tmp_path, capsys):
    config = small_config(tmp_path)
    assert cli.main(["train", "--config", str(config)]) == cli.EXIT_MISSING
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["code"] == 3 and err["path"].endswith("A.json")
    assert cli.main(["simulate", "--config", str(tmp_path / "nope.json")]) == cli.EXIT_MISSING
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["simulate", "--config", str(bad)]) == cli.EXIT_CONFIG
    assert cli.main(["simulate", "--config", str(config), "--set", "projection=tan"]) == cli.EXIT_CONFIG
    assert cli.main(["simulate", "--config", str(config), "--set", 'split=[{"mode": "loco", "held_out": "Z"}]']) == cli.EXIT_CONFIG
    dup = small_config(tmp_path, cities=[{"name": "A", "geometry": {"incidence_deg": 30}}] * 2)
    assert cli.main(["simulate", "--config", str(dup)]) == cli.EXIT_CONFIG


def test_numeric_failure_exit_code(tmp_path):
    config = small_config(tmp_path, split={"mode": "ratio", "train_frac": 0.7}, training={"lr": 1e300, "epochs": 1})
    for cmd in ("simulate", "build-dataset"):
        assert cli.main([cmd, "--config", str(config)]) == 0
    assert cli.main(["train", "--config", str(config)]) == cli.EXIT_NUMERIC


def test_overrides_and_seed_env(tmp_path):
    config = small_config(tmp_path)
    cfg = cli.load_config(config, ["training.lr=0.01", "cities.1.scene.n_buildings=3", "pipeline.strata_edges_m=[40]"], env={})
    assert cfg["training"]["lr"] == 0.01
    assert cfg["cities"][1]["scene"]["n_buildings"] == 3
    assert cfg["pipeline"]["strata_edges_m"] == [40]
    seeded = cli.load_config(config, env={cli.SEED_ENV: "5"})
    assert seeded["seed"] == 5
    assert cli.config_hash(seeded) != cli.config_hash(cli.load_config(config, env={}))
    with pytest.raises(cli.ConfigError):
        cli.load_config(config, ["cities.9.name=x"], env={})
    with pytest.raises(cli.ConfigError):
        cli.load_config(config, env={cli.SEED_ENV: "abc"})


def test_out_flag_and_predicted_raster(tmp_path):
    config = small_config(tmp_path, split={"mode": "loco", "held_out": "C"}, predict={"raster": True})
    out = tmp_path / "elsewhere"
    run_all(config, "--out", str(out))
    assert (out / "experiments" / "loco-C" / "pred_height_C.hdr.json").exists()
    text = (out / "report.txt").read_text()
    assert [label for label, _ in parse_table(text)] == ["C"]
    assert not (tmp_path / "run").exists()
