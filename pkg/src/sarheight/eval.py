"""Height error metrics stratified by reference height, tables and CSV exports."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_THRESHOLD_M = 40.0
ABSENT = "—"
METRIC_COLUMNS = (
    "city_id",
    "n_all", "mae_all", "rmse_all",
    "n_lt40", "mae_lt40", "rmse_lt40",
    "n_ge40", "mae_ge40", "rmse_ge40",
)


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class EvalPair:
    building_id: str
    city_id: str
    ref_height_m: float
    pred_height_m: float

    def __post_init__(self):
        if not (self.ref_height_m >= 0 and self.pred_height_m >= 0):
            raise EvalError(f"{self.building_id}: heights must be finite and >= 0")

    @property
    def error_m(self) -> float:
        return self.pred_height_m - self.ref_height_m


@dataclass
class ErrorAccumulator:
    """Streaming |e| and e^2 sums with Neumaier compensation.

    Squares are kept relative to the largest |e| seen so far so tiny or
    huge errors neither underflow nor overflow.
    """

    n: int = 0
    _abs: list = field(default_factory=lambda: [0.0, 0.0])
    _sq: list = field(default_factory=lambda: [0.0, 0.0])
    _scale: float = 0.0

    @staticmethod
    def _add(acc, x):
        s, c = acc
        t = s + x
        if abs(s) >= abs(x):
            c += (s - t) + x
        else:
            c += (x - t) + s
        acc[0], acc[1] = t, c

    def _rescale(self, scale: float) -> None:
        if scale > self._scale:
            r = (self._scale / scale) ** 2
            self._sq[0] *= r
            self._sq[1] *= r
            self._scale = scale

    def add(self, error: float) -> None:
        a = abs(float(error))
        self.n += 1
        self._add(self._abs, a)
        self._rescale(a)
        if a > 0:
            self._add(self._sq, (a / self._scale) ** 2)

    def merge(self, other: "ErrorAccumulator") -> "ErrorAccumulator":
        out = ErrorAccumulator(self.n + other.n, list(self._abs), list(self._sq), self._scale)
        out._rescale(other._scale)
        r = (other._scale / out._scale) ** 2 if out._scale > 0 else 0.0
        self._add(out._abs, other._abs[0])
        self._add(out._abs, other._abs[1])
        self._add(out._sq, other._sq[0] * r)
        self._add(out._sq, other._sq[1] * r)
        return out

    @property
    def mae(self) -> float | None:
        return (self._abs[0] + self._abs[1]) / self.n if self.n else None

    @property
    def rmse(self) -> float | None:
        if not self.n:
            return None
        return self._scale * math.sqrt((self._sq[0] + self._sq[1]) / self.n)


def _errors(pairs) -> list[float]:
    return [p.error_m if isinstance(p, EvalPair) else float(p[1]) - float(p[0]) for p in pairs]


def mae(pairs) -> float | None:
    """Mean absolute error; ``None`` for no pairs. Pairs are EvalPair or (ref, pred)."""
    acc = ErrorAccumulator()
    for e in _errors(pairs):
        acc.add(e)
    return acc.mae


def rmse(pairs) -> float | None:
    acc = ErrorAccumulator()
    for e in _errors(pairs):
        acc.add(e)
    return acc.rmse


@dataclass(frozen=True)
class MetricsReport:
    city_id: str
    n_all: int
    mae_all: float | None
    rmse_all: float | None
    n_lt40: int
    mae_lt40: float | None
    rmse_lt40: float | None
    n_ge40: int
    mae_ge40: float | None
    rmse_ge40: float | None
    threshold_m: float = DEFAULT_THRESHOLD_M

    def values(self) -> list[float | None]:
        return [self.mae_all, self.mae_lt40, self.mae_ge40, self.rmse_all, self.rmse_lt40, self.rmse_ge40]

    def relabel(self, label: str) -> "MetricsReport":
        return MetricsReport(label, *[getattr(self, c) for c in METRIC_COLUMNS[1:]], self.threshold_m)


def stratified_report(pairs: Iterable[EvalPair], threshold: float = DEFAULT_THRESHOLD_M, city_id: str | None = None) -> MetricsReport:
    """Metrics over all pairs and split by reference height (< threshold, >= threshold)."""
    low, high = ErrorAccumulator(), ErrorAccumulator()
    cities = set()
    for p in pairs:
        cities.add(p.city_id)
        (low if p.ref_height_m < threshold else high).add(p.error_m)
    every = low.merge(high)
    if city_id is None:
        city_id = next(iter(cities)) if len(cities) == 1 else "ALL"
    return MetricsReport(
        city_id,
        every.n, every.mae, every.rmse,
        low.n, low.mae, low.rmse,
        high.n, high.mae, high.rmse,
        threshold,
    )


def reports_by_city(pairs: Sequence[EvalPair], threshold: float = DEFAULT_THRESHOLD_M, include_all: bool = True) -> list[MetricsReport]:
    cities = sorted({p.city_id for p in pairs})
    out = [stratified_report([p for p in pairs if p.city_id == c], threshold, c) for c in cities]
    if include_all and len(cities) > 1:
        out.append(stratified_report(pairs, threshold, "ALL"))
    return out


# ---------------------------------------------------------------- text table


def _cell(v: float | None) -> str:
    return ABSENT if v is None else f"{v:.2f}"


def table_header(threshold: float = DEFAULT_THRESHOLD_M) -> str:
    t = f"{threshold:g}"
    cols = ["MAE(∀h)", f"MAE(h<{t})", f"MAE(h≥{t})", "RMSE(∀h)", f"RMSE(h<{t})", f"RMSE(h≥{t})"]
    return "City " + " ".join(cols)


def format_row(report: MetricsReport) -> str:
    return " ".join([report.city_id] + [_cell(v) for v in report.values()])


def format_table(reports: Sequence[MetricsReport], title: str | None = None) -> str:
    """Header plus one space-separated row per report; absent metrics print as an em dash cell."""
    if not reports:
        raise EvalError("format_table needs at least one report")
    lines = [title] if title else []
    lines.append(table_header(reports[0].threshold_m))
    lines.extend(format_row(r) for r in reports)
    return "\n".join(lines) + "\n"


def parse_table(text: str) -> list[tuple[str, list[float | None]]]:
    """Rows of a table from :func:`format_table`; the label is everything before the last six cells."""
    rows = []
    for line in text.splitlines():
        if not line.strip() or line.startswith("City "):
            continue
        parts = line.rsplit(" ", 6)
        if len(parts) != 7:
            continue
        try:
            vals = [None if c == ABSENT else float(c) for c in parts[1:]]
        except ValueError:
            continue
        rows.append((parts[0], vals))
    return rows


# ---------------------------------------------------------------- CSV files


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _open_csv(path, comment: str | None):
    path = Path(path)
    try:
        fh = path.open("w", newline="", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc
    if comment:
        fh.write(f"# {comment}\n")
    return fh


def write_metrics_csv(reports: Sequence[MetricsReport], path, comment: str | None = None) -> None:
    with _open_csv(path, comment) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in reports:
            w.writerow([r.city_id] + [_fmt(getattr(r, c)) for c in METRIC_COLUMNS[1:]])


def _data_lines(path):
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def read_metrics_csv(path) -> list[MetricsReport]:
    out = []
    for row in _data_lines(path):
        vals = []
        for c in METRIC_COLUMNS[1:]:
            raw = row[c]
            vals.append(int(raw) if c.startswith("n_") else (float(raw) if raw else None))
        out.append(MetricsReport(row["city_id"], *vals))
    return out


def export_scatter(pairs: Iterable[EvalPair], path, comment: str | None = None) -> None:
    """Per-building absolute errors ordered by (city_id, building_id)."""
    rows = sorted(pairs, key=lambda p: (p.city_id, p.building_id))
    with _open_csv(path, comment) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["building_id", "city_id", "ref_height_m", "abs_error_m"])
        for p in rows:
            w.writerow([p.building_id, p.city_id, _fmt(p.ref_height_m), _fmt(abs(p.error_m))])


def read_scatter(path) -> list[dict]:
    rows = _data_lines(path)
    for r in rows:
        r["ref_height_m"] = float(r["ref_height_m"])
        r["abs_error_m"] = float(r["abs_error_m"])
    return rows


def height_density(heights: Sequence[float], bin_m: float) -> list[tuple[float, int, float]]:
    """(bin_start_m, count, density) from 0 up to the bin holding the tallest height."""
    if not bin_m > 0:
        raise EvalError("bin_m must be > 0")
    h = np.asarray(heights, dtype=np.float64)
    if h.size == 0:
        return []
    idx = np.floor(h / bin_m).astype(np.int64)
    counts = np.bincount(idx)
    dens = counts / (h.size * bin_m)
    return [(i * bin_m, int(c), float(d)) for i, (c, d) in enumerate(zip(counts, dens))]


def export_height_density(heights_by_city: dict, bin_m: float, path, comment: str | None = None) -> None:
    """Per-city height histograms; values are footprints or plain heights."""
    with _open_csv(path, comment) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["city_id", "bin_start_m", "count", "density"])
        for city in sorted(heights_by_city):
            hs = [getattr(b, "height_m", b) for b in heights_by_city[city]]
            for start, count, dens in height_density(hs, bin_m):
                w.writerow([city, _fmt(float(start)), count, _fmt(dens)])
