"""Command-line driver: simulate, build-dataset, train, predict, evaluate, report.

Every stage reads the artifacts of the previous one from the run directory
and refuses them when their recorded config hash differs from the current
config. Exit codes: 0 ok, 2 config, 3 missing or stale input, 4 numeric
failure, 5 I/O or malformed file.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import os
import sys
import zlib
from collections import Counter
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import eval as ev
from .geometry import AcquisitionGeometry, Footprint, GeometryError, Projection, read_footprints, write_footprints
from .pipeline import (
    PipelineError,
    build_city_samples,
    read_sample_set,
    split_loco,
    split_ratio,
    subsample_city,
    write_sample_set,
)
from .regressor import (
    ConfigError as ModelConfigError,
    ModelConfig,
    NumericError,
    ShapeError,
    TrainHyper,
    init,
    load_checkpoint,
    predict_heights,
    save_checkpoint,
    train,
    write_loss_csv,
)
from .scene_sim import (
    RasterFormatError,
    SceneError,
    SceneSpec,
    generate_city,
    read_raster,
    read_raster_header,
    render_amplitude,
    render_height_truth,
    write_raster,
)

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4, 5
SEED_ENV = "SARHEIGHT_SEED"

DEFAULTS = {
    "seed": 0,
    "projection": "cos",
    "cities": [],
    "pipeline": {"patch_px": 256, "overlap": 0.2, "chip_px": 64, "subsample_n": 20000, "strata_edges_m": None},
    "model": {},
    "training": {"lr": 1e-3, "batch_size": 32, "epochs": 10},
    "split": [{"mode": "loco", "held_out": "all"}, {"mode": "ratio", "train_frac": 0.7}],
    "evaluate": {"threshold_m": 40.0, "density_bin_m": 5.0},
    "predict": {"raster": False},
    "output_dir": "run",
}


class CliError(Exception):
    code = EXIT_IO
    kind = "io_error"


class ConfigError(CliError):
    code = EXIT_CONFIG
    kind = "config_error"


class MissingInputError(CliError):
    code = EXIT_MISSING
    kind = "missing_input"

    def __init__(self, path, message=None):
        self.path = str(path)
        super().__init__(message or f"missing input: {path}")


class StaleArtifactError(MissingInputError):
    kind = "stale_artifact"

    def __init__(self, path, found, expected):
        super().__init__(path, f"stale artifact {path}: config_hash {found} != {expected}")


# ---------------------------------------------------------------- config


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    """Set one dotted path, e.g. ``training.lr=0.001`` or ``cities.0.scene.n_buildings=50``."""
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for i, part in enumerate(parts):
        last = i == len(parts) - 1
        if isinstance(node, list):
            try:
                idx = int(part)
                node[idx]
            except (ValueError, IndexError):
                raise ConfigError(f"--set {key}: bad list index {part!r}") from None
            if last:
                node[idx] = _parse_value(raw)
            else:
                node = node[idx]
        elif isinstance(node, dict):
            if last:
                node[part] = _parse_value(raw)
            else:
                if part not in node:
                    node[part] = {}
                node = node[part]
        else:
            raise ConfigError(f"--set {key}: {'.'.join(parts[:i])} is not a mapping")


def config_hash(cfg: dict) -> str:
    body = {k: v for k, v in cfg.items() if k != "output_dir"}
    text = json.dumps(body, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def city_seed(global_seed: int, name: str) -> int:
    ss = np.random.SeedSequence(int(global_seed), spawn_key=(zlib.crc32(name.encode("utf-8")),))
    return int(ss.generate_state(1)[0])


class Run:
    """Validated config plus derived objects and artifact paths."""

    def __init__(self, cfg: dict, out_dir=None):
        self.cfg = cfg
        self.out = Path(out_dir if out_dir is not None else cfg["output_dir"])
        self.hash = config_hash(cfg)
        self.seed = int(cfg["seed"])
        try:
            self.projection = Projection(cfg["projection"]).value
        except ValueError:
            raise ConfigError(f"unknown projection {cfg['projection']!r}") from None
        names = [c.get("name") for c in cfg["cities"]]
        if not names:
            raise ConfigError("config lists no cities")
        if any(not isinstance(n, str) or not n for n in names) or len(set(names)) != len(names):
            raise ConfigError("city names must be unique non-empty strings")
        self.city_names = names
        self.scenes = {}
        try:
            for c in cfg["cities"]:
                geom = AcquisitionGeometry.from_dict(c.get("geometry", {}))
                scene = dict(c.get("scene", {}))
                scene.update(seed=int(c.get("seed", city_seed(self.seed, c["name"]))), geom=geom.to_dict(), projection=self.projection)
                self.scenes[c["name"]] = SceneSpec.from_dict(scene)
            pipe = cfg["pipeline"]
            self.chip_px = int(pipe["chip_px"])
            model = dict(cfg["model"])
            if "chip_px" in model and int(model["chip_px"]) != self.chip_px:
                raise ConfigError("model.chip_px must equal pipeline.chip_px")
            model.setdefault("chip_px", self.chip_px)
            model.setdefault("seed", self.seed)
            self.model = ModelConfig.from_dict(model)
            hyper = dict(cfg["training"])
            hyper.setdefault("seed", self.seed)
            self.hyper = TrainHyper.from_dict(hyper)
        except (TypeError, KeyError, ValueError, SceneError, GeometryError, ModelConfigError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid config: {exc}") from exc
        if not 0 <= float(pipe["overlap"]) < 1 or int(pipe["patch_px"]) <= 0:
            raise ConfigError("pipeline.patch_px must be > 0 and overlap in [0, 1)")
        if float(cfg["evaluate"]["density_bin_m"]) <= 0:
            raise ConfigError("evaluate.density_bin_m must be > 0")
        self.experiments = self._experiments(cfg["split"])

    def _experiments(self, split) -> list[dict]:
        items = split if isinstance(split, list) else [split]
        out = []
        for item in items:
            mode = item.get("mode") if isinstance(item, dict) else None
            if mode == "loco":
                held = item.get("held_out", "all")
                cities = self.city_names if held == "all" else [held]
                for c in cities:
                    if c not in self.city_names:
                        raise ConfigError(f"held-out city {c!r} is not configured")
                    if len(self.city_names) < 2:
                        raise ConfigError("leave-one-city-out needs at least two cities")
                    out.append({"id": f"loco-{c}", "mode": "loco", "held_out": c})
            elif mode == "ratio":
                frac = float(item.get("train_frac", 0.7))
                if not 0 < frac < 1:
                    raise ConfigError("ratio train_frac must lie in (0, 1)")
                pct = int(round(frac * 100))
                out.append({"id": f"ratio-{pct}", "mode": "ratio", "train_frac": frac, "label": f"In-Distribution ({pct}-{100 - pct})"})
            else:
                raise ConfigError(f"unknown split mode {mode!r}")
        ids = [e["id"] for e in out]
        if len(set(ids)) != len(ids):
            raise ConfigError("split produces duplicate experiments")
        return out

    # artifact paths
    def city_dir(self, name):
        return self.out / "cities" / name

    def dataset(self, name):
        return self.out / "datasets" / f"{name}.json"

    def exp_dir(self, exp_id):
        return self.out / "experiments" / exp_id


def load_config(path, overrides=(), env=None) -> dict:
    env = os.environ if env is None else env
    path = Path(path)
    if not path.exists():
        raise MissingInputError(path, f"config file not found: {path}")
    try:
        user = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON at line {exc.lineno} column {exc.colno}") from exc
    if not isinstance(user, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = set(user) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = _merge(DEFAULTS, user)
    if env.get(SEED_ENV):
        try:
            cfg["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer") from None
    for item in overrides:
        apply_override(cfg, item)
    return cfg


# ---------------------------------------------------------------- artifact helpers


def _require(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(path)
    return path


def _check(run: Run, path, found):
    if found != run.hash:
        raise StaleArtifactError(path, found, run.hash)


def _json_hash(path) -> str | None:
    with _require(path).open(encoding="utf-8") as fh:
        return json.load(fh).get("config_hash")


def _csv_hash(path) -> str | None:
    with _require(path).open(encoding="utf-8") as fh:
        first = fh.readline().strip()
    return first.split()[-1] if first.startswith("# config_hash") else None


def _comment(run: Run) -> str:
    return f"config_hash {run.hash}"


def _read_csv(path) -> list[dict]:
    with _require(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def _write_text(path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8")


def _load_city(run: Run, name: str):
    d = run.city_dir(name)
    fp_path = d / "footprints.json"
    _check(run, fp_path, _json_hash(fp_path))
    _, footprints, _ = read_footprints(fp_path)
    return footprints


def _load_datasets(run: Run) -> dict:
    out = {}
    for name in run.city_names:
        path = run.dataset(name)
        _check(run, path, _json_hash(path))
        out[name] = read_sample_set(path)[1]
    return out


# ---------------------------------------------------------------- stages


def cmd_simulate(run: Run) -> list[Path]:
    written = []
    for name in run.city_names:
        spec = run.scenes[name]
        city = generate_city(spec)
        d = run.city_dir(name)
        d.mkdir(parents=True, exist_ok=True)
        write_footprints(d / "footprints.json", name, city, config_hash=run.hash, scene=spec.to_dict())
        write_raster(render_amplitude(city, spec), d / "amplitude", config_hash=run.hash, city=name)
        write_raster(render_height_truth(city, spec), d / "height", config_hash=run.hash, city=name)
        written.append(d)
    return written


def cmd_build_dataset(run: Run) -> list[Path]:
    pipe = run.cfg["pipeline"]
    written = []
    run.dataset("x").parent.mkdir(parents=True, exist_ok=True)
    for name in run.city_names:
        footprints = _load_city(run, name)
        hdr_path = run.city_dir(name) / "amplitude.hdr.json"
        _check(run, hdr_path, read_raster_header(_require(hdr_path)).get("config_hash"))
        amp = read_raster(hdr_path)
        stats = Counter()
        samples = build_city_samples(
            amp, footprints, run.scenes[name].geom, name,
            int(pipe["patch_px"]), float(pipe["overlap"]), run.chip_px, run.projection, stats,
        )
        samples = subsample_city(samples, int(pipe["subsample_n"]), run.seed, pipe.get("strata_edges_m"))
        path = run.dataset(name)
        write_sample_set(
            path, samples, name, run.chip_px, config_hash=run.hash,
            stats={k: int(v) for k, v in sorted(stats.items())},
        )
        written.append(path)
    return written


def _experiment_split(run: Run, exp: dict, datasets: dict):
    pooled = [s for name in run.city_names for s in datasets[name]]
    if exp["mode"] == "loco":
        return split_loco(pooled, exp["held_out"])
    return split_ratio(pooled, exp["train_frac"], run.seed)


def cmd_train(run: Run) -> list[Path]:
    datasets = _load_datasets(run)
    written = []
    for exp in run.experiments:
        train_s, test_s = _experiment_split(run, exp, datasets)
        if not train_s:
            raise MissingInputError(run.dataset(exp.get("held_out", "")), f"experiment {exp['id']} has no training samples")
        d = run.exp_dir(exp["id"])
        d.mkdir(parents=True, exist_ok=True)
        state = train(init(run.model), train_s, run.hyper)
        save_checkpoint(state, d / "model", config_hash=run.hash, experiment=exp["id"])
        write_loss_csv(state, d / "loss.csv", comment=_comment(run))
        split_doc = {
            "config_hash": run.hash,
            "experiment": exp,
            "train_cities": sorted({s.city_id for s in train_s}),
            "test_cities": sorted({s.city_id for s in test_s}),
            "train": [[s.city_id, s.building_id] for s in train_s],
            "test": [[s.city_id, s.building_id] for s in test_s],
        }
        _write_text(d / "split.json", json.dumps(split_doc, indent=1))
        written.append(d)
    return written


def _load_split(run: Run, exp_id: str) -> dict:
    path = run.exp_dir(exp_id) / "split.json"
    _check(run, path, _json_hash(path))
    return json.loads(path.read_text(encoding="utf-8"))


def _index(datasets: dict) -> dict:
    return {(s.city_id, s.building_id): s for samples in datasets.values() for s in samples}


def cmd_predict(run: Run) -> list[Path]:
    datasets = _load_datasets(run)
    by_key = _index(datasets)
    written = []
    for exp in run.experiments:
        d = run.exp_dir(exp["id"])
        split = _load_split(run, exp["id"])
        ckpt = d / "model.json"
        _check(run, ckpt, _json_hash(ckpt))
        state, _ = load_checkpoint(ckpt)
        test = [by_key[tuple(k)] for k in split["test"]]
        preds = predict_heights(state, test, run.projection) if test else np.zeros(0)
        with (d / "predictions.csv").open("w", newline="", encoding="utf-8") as fh:
            fh.write(f"# {_comment(run)}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["building_id", "city_id", "pred_height_m"])
            for s, p in zip(test, preds):
                w.writerow([s.building_id, s.city_id, repr(float(p))])
        if run.cfg["predict"].get("raster"):
            for city in split["test_cities"]:
                pred_by_id = {s.building_id: float(p) for s, p in zip(test, preds) if s.city_id == city}
                fps = [Footprint(f.id, f.vertices, pred_by_id[f.id]) for f in _load_city(run, city) if f.id in pred_by_id]
                write_raster(render_height_truth(fps, run.scenes[city]), d / f"pred_height_{city}", config_hash=run.hash, city=city)
        written.append(d / "predictions.csv")
    return written


def cmd_evaluate(run: Run) -> list[Path]:
    datasets = _load_datasets(run)
    by_key = _index(datasets)
    threshold = float(run.cfg["evaluate"]["threshold_m"])
    written = []
    for exp in run.experiments:
        d = run.exp_dir(exp["id"])
        pred_path = d / "predictions.csv"
        _check(run, pred_path, _csv_hash(pred_path))
        pairs = []
        for row in _read_csv(pred_path):
            key = (row["city_id"], row["building_id"])
            if key not in by_key:
                raise MissingInputError(pred_path, f"{pred_path}: no reference for building {key}")
            pairs.append(ev.EvalPair(key[1], key[0], by_key[key].ref_height_m, float(row["pred_height_m"])))
        reports = ev.reports_by_city(pairs, threshold)
        ev.write_metrics_csv(reports, d / "metrics.csv", comment=_comment(run))
        _write_text(d / "table.txt", ev.format_table(reports) if reports else "")
        ev.export_scatter(pairs, d / "scatter.csv", comment=_comment(run))
        written.append(d / "metrics.csv")
    heights = {name: _load_city(run, name) for name in run.city_names}
    ev.export_height_density(heights, float(run.cfg["evaluate"]["density_bin_m"]), run.out / "density.csv", comment=_comment(run))
    written.append(run.out / "density.csv")
    return written


def cmd_report(run: Run) -> list[Path]:
    ood, ind, meta = [], [], []
    for exp in run.experiments:
        d = run.exp_dir(exp["id"])
        path = d / "metrics.csv"
        _check(run, path, _csv_hash(path))
        reports = {r.city_id: r for r in ev.read_metrics_csv(path)}
        split = _load_split(run, exp["id"])
        if exp["mode"] == "loco":
            row = reports.get(exp["held_out"])
            if row is not None:
                ood.append(row)
        else:
            row = reports.get("ALL") or next(iter(reports.values()), None)
            if row is not None:
                ind.append(row.relabel(exp["label"]))
        meta.append({
            "experiment": exp["id"],
            "mode": exp["mode"],
            "train_cities": split["train_cities"],
            "test_cities": split["test_cities"],
            "n_train": len(split["train"]),
            "n_test": len(split["test"]),
        })
    lines = [f"# config_hash {run.hash}", ""]
    if ood:
        lines.append(ev.format_table(ood, title="Out-of-Distribution (leave-one-city-out)"))
    for r in ind:
        lines.append(ev.format_table([r], title=r.city_id))
    lines.append("Training cities")
    for m in meta:
        lines.append(f"{m['experiment']}: train {', '.join(m['train_cities'])}; test {', '.join(m['test_cities'])}; n_train {m['n_train']}; n_test {m['n_test']}")
    _write_text(run.out / "report.txt", "\n".join(lines) + "\n")
    labeled = [r for r in ood] + ind
    ev.write_metrics_csv(labeled, run.out / "report_metrics.csv", comment=_comment(run))
    doc = {"config_hash": run.hash, "experiments": meta, "ood_rows": [r.city_id for r in ood], "id_rows": [r.city_id for r in ind]}
    _write_text(run.out / "report.json", json.dumps(doc, indent=1))
    return [run.out / "report.txt", run.out / "report_metrics.csv", run.out / "report.json"]


COMMANDS = {
    "simulate": cmd_simulate,
    "build-dataset": cmd_build_dataset,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sarheight", description="Building heights from SAR layover extents.")
    ap.add_argument("command", choices=list(COMMANDS))
    ap.add_argument("--config", required=True, help="run config (JSON)")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override a config field by dotted path")
    ap.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenMP worker threads")
    ap.add_argument("--out", default=None, help="output directory (overrides output_dir)")
    return ap


def _fail(code: int, kind: str, message: str, **extra) -> int:
    print(json.dumps({"error": kind, "code": code, "message": message, **extra}), file=sys.stderr)
    return code


def _thread_limit(n):
    if n is None:
        return nullcontext()
    if n < 1:
        raise ConfigError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
        run = Run(cfg, args.out)
        run.out.mkdir(parents=True, exist_ok=True)
        with _thread_limit(args.threads):
            written = COMMANDS[args.command](run)
    except CliError as exc:
        extra = {"path": exc.path} if isinstance(exc, MissingInputError) else {}
        return _fail(exc.code, exc.kind, str(exc), **extra)
    except NumericError as exc:
        return _fail(EXIT_NUMERIC, "numeric_error", str(exc), layer=exc.layer, step=exc.step)
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING, "missing_input", str(exc), path=exc.filename)
    except (SceneError, GeometryError, ModelConfigError) as exc:
        return _fail(EXIT_CONFIG, "config_error", str(exc))
    except (OSError, RasterFormatError, PipelineError, ShapeError, json.JSONDecodeError, KeyError) as exc:
        return _fail(EXIT_IO, "io_error", str(exc))
    for p in written:
        print(p)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
