"""Aggregation, correlation statistics, tabular reports and SVG plots."""
from __future__ import annotations

import csv
import datetime as dt
import io
import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import betainc

from .sir import CompartmentSeries, RtSeries

__all__ = [
    "AggregateResult",
    "Correlation",
    "RegionAggregate",
    "StatisticsError",
    "emit_plot",
    "emit_report",
    "load_published_tables",
    "mean_std",
    "pearson",
    "slugify",
]

log = logging.getLogger(__name__)


class StatisticsError(ValueError):
    pass


def pearson(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    """Sample Pearson r and its two-sided p-value under a Student-t null.

    With df = n - 2 and t = r * sqrt(df / (1 - r^2)), the two-sided tail mass
    is the regularized incomplete beta I_{df / (df + t^2)}(df / 2, 1 / 2).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise StatisticsError("x and y must be 1-d and of equal length")
    n = x.size
    if n < 3:
        raise StatisticsError(f"need at least 3 points, got {n}")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise StatisticsError("zero variance")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    r = max(-1.0, min(1.0, r))
    df = n - 2
    if abs(r) == 1.0:
        return r, 0.0
    t2 = r * r * df / (1.0 - r * r)
    p = float(betainc(0.5 * df, 0.5, df / (df + t2)))
    return r, min(max(p, 0.0), 1.0)


def mean_std(values: Iterable[float]) -> tuple[float, float]:
    """Mean and population standard deviation (0 for a single value)."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise StatisticsError("no values to aggregate")
    return float(arr.mean()), float(arr.std())


def slugify(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", name).strip("_").lower() or "region"


@dataclass
class Correlation:
    pair: str
    r: float
    p: float
    n: int

    def __post_init__(self):
        if not (abs(self.r) <= 1 and 0 <= self.p <= 1):
            raise StatisticsError(f"invalid correlation entry {self}")


@dataclass
class RegionAggregate:
    region: str
    N: float | None = None
    vaccination_pct: float | None = None
    stats: dict[str, tuple[float, float]] = field(default_factory=dict)
    runs: list[dict] = field(default_factory=list)

    def mean(self, key: str) -> float:
        return self.stats[key][0]

    @classmethod
    def from_runs(cls, region: str, runs: list[dict], keys: Sequence[str], *, N=None,
                  vaccination_pct=None) -> "RegionAggregate":
        stats = {k: mean_std(run[k] for run in runs) for k in keys}
        return cls(region, N, vaccination_pct, stats, runs)


@dataclass
class AggregateResult:
    mode: str
    rows: list[RegionAggregate]
    correlations: list[Correlation] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)
    # per-region per-day Rt columns (written as rt_series_<region>.csv)
    series: dict[str, dict[str, np.ndarray]] = field(default_factory=dict, repr=False)
    # per-region dataset and fitted curve, used for plots and dataset export
    artifacts: dict[str, dict] = field(default_factory=dict, repr=False)

    def row(self, region: str) -> RegionAggregate:
        for r in self.rows:
            if r.region == region:
                return r
        raise KeyError(region)

    def to_json_dict(self) -> dict:
        return {
            "mode": self.mode,
            "regions": [
                {
                    "region": r.region,
                    "N": r.N,
                    "vaccination_pct": r.vaccination_pct,
                    "stats": {k: {"mean": m, "std": s} for k, (m, s) in r.stats.items()},
                    "runs": r.runs,
                }
                for r in self.rows
            ],
            "correlations": [asdict(c) for c in self.correlations],
            "errors": list(self.errors),
        }


def load_published_tables(path=None) -> list[dict]:
    """Rows of the bundled (or given) published summary table, country first."""
    if path is None:
        text = resources.files("pinnsir.resources").joinpath("published_tables.csv").read_text("utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    rows = []
    for raw in csv.DictReader(lines):
        row = {"region": raw["region"], "level": raw["level"]}
        for key, value in raw.items():
            if key not in row:
                row[key] = float(value)
        rows.append(row)
    rows.sort(key=lambda r: r["level"] != "country")
    return rows


# --- tabular output -------------------------------------------------------

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.6g}"


PARAMS_COLUMNS = ("region", "N_millions", "alpha_mean", "alpha_std", "beta_mean", "beta_std",
                  "vaccination_pct", "runs")


def _params_rows(result: AggregateResult) -> list[list[str]]:
    rows = []
    for r in result.rows:
        a, b = r.stats["alpha"], r.stats["beta"]
        rows.append([r.region, _fmt(None if r.N is None else r.N / 1e6), _fmt(a[0]), _fmt(a[1]),
                     _fmt(b[0]), _fmt(b[1]), _fmt(r.vaccination_pct), str(len(r.runs))])
    return rows


def _rt_labels(result: AggregateResult) -> list[str]:
    labels = []
    for r in result.rows:
        for key in r.stats:
            if key.startswith("peak_rt@"):
                label = key.split("@", 1)[1]
                if label not in labels:
                    labels.append(label)
    return labels


RT_COLUMNS = ("region", "alpha_label", "alpha", "days_above_one_mean", "days_above_one_std",
              "peak_rt_mean", "peak_rt_std", "vaccination_pct", "runs")


def _rt_rows(result: AggregateResult) -> list[list[str]]:
    rows = []
    for r in result.rows:
        for label in _rt_labels(result):
            key = f"@{label}"
            if "peak_rt" + key not in r.stats:
                continue
            d, p, a = r.stats["days_above_one" + key], r.stats["peak_rt" + key], r.stats["alpha" + key]
            n_runs = sum(1 for run in r.runs if run.get("alpha_label") == label)
            rows.append([r.region, label, _fmt(a[0]), _fmt(d[0]), _fmt(d[1]), _fmt(p[0]), _fmt(p[1]),
                         _fmt(r.vaccination_pct), str(n_runs)])
    return rows


def _write_csv(path: Path, header: Sequence[str], rows: list[list[str]]) -> Path:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def emit_report(result: AggregateResult, out_dir, fmt: str = "csv") -> list[Path]:
    """Write the aggregate as CSV tables or as one JSON document.

    CSV: ``params.csv`` (alpha/beta per region) and/or ``rt_summary.csv``
    (days with Rt > 1 and peak Rt per region and alpha choice), plus
    ``rt_series_<region>.csv`` when per-day Rt series are present.
    JSON: ``results.json`` with per-run raw values and ``correlations.json``.
    """
    if not result.rows:
        raise ValueError("nothing to report: no regions")
    if fmt not in ("csv", "json"):
        raise ValueError(f"unknown report format {fmt!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if fmt == "json":
        written.append(_write_json(out / "results.json", result.to_json_dict()))
        written.append(_write_json(out / "correlations.json",
                                   [asdict(c) for c in result.correlations]))
        return written
    if all("alpha" in r.stats and "beta" in r.stats for r in result.rows):
        written.append(_write_csv(out / "params.csv", PARAMS_COLUMNS, _params_rows(result)))
    if _rt_labels(result):
        written.append(_write_csv(out / "rt_summary.csv", RT_COLUMNS, _rt_rows(result)))
    for region, cols in result.series.items():
        names = list(cols)
        n = len(cols[names[0]])
        rows = [[_fmt(cols[c][i]) if c != "date" else cols[c][i] for c in names] for i in range(n)]
        written.append(_write_csv(out / f"rt_series_{slugify(region)}.csv", names, rows))
    return written


def _write_json(path: Path, payload) -> Path:
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


# --- SVG plots -------------------------------------------------------------

_W, _H = 900, 360
_ML, _MR, _MT, _MB = 60, 20, 40, 40


def _esc(text: str) -> str:
    return (str(text).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
            .replace('"', "&quot;"))


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=raw)
    first = math.ceil(lo / step) * step
    return [first + k * step for k in range(int((hi - first) / step) + 1)]


def emit_plot(series: RtSeries | CompartmentSeries, path, annotations: Sequence[tuple] = (), *,
              start_date: dt.date | None = None, title: str = "", overlay=None) -> Path:
    """Single-panel SVG line chart of an Rt series or of a compartment's I curve.

    Rt plots get a dashed reference line at Rt = 1. ``annotations`` are
    ``(when, label)`` pairs; ``when`` is a day offset or, with ``start_date``,
    a calendar date. Annotations outside the plotted range are skipped with a
    warning. ``overlay`` is an optional second y-series drawn dashed.
    """
    if len(series) == 0:
        raise ValueError("cannot plot an empty series")
    is_rt = isinstance(series, RtSeries)
    x = np.asarray(series.t, dtype=np.float64)
    y = np.asarray(series.rt if is_rt else series.I, dtype=np.float64)
    ys = [y] if overlay is None else [y, np.asarray(overlay, dtype=np.float64)]
    y_lo = min(float(v.min()) for v in ys)
    y_hi = max(float(v.max()) for v in ys)
    if is_rt:
        y_lo, y_hi = min(y_lo, 1.0), max(y_hi, 1.0)
    if y_hi == y_lo:
        y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
    pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad
    x_lo, x_hi = float(x[0]), float(x[-1])
    x_span = (x_hi - x_lo) or 1.0
    pw, ph = _W - _ML - _MR, _H - _MT - _MB

    def px(v):
        return _ML + (v - x_lo) / x_span * pw if x_hi > x_lo else _ML + pw / 2

    def py(v):
        return _MT + (y_hi - v) / (y_hi - y_lo) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_ML}" y="24" font-family="sans-serif" font-size="16">{_esc(title)}</text>',
        f'<line class="axis" x1="{_ML}" y1="{_MT + ph}" x2="{_ML + pw}" y2="{_MT + ph}" stroke="black"/>',
        f'<line class="axis" x1="{_ML}" y1="{_MT}" x2="{_ML}" y2="{_MT + ph}" stroke="black"/>',
    ]
    for tv in _ticks(y_lo, y_hi):
        parts.append(f'<text x="{_ML - 6}" y="{py(tv) + 4:.1f}" font-family="sans-serif" font-size="11" '
                     f'text-anchor="end">{tv:.4g}</text>')
    for tv in _ticks(x_lo, x_hi):
        label = (start_date + dt.timedelta(days=round(tv))).isoformat() if start_date else f"{tv:g}"
        parts.append(f'<text x="{px(tv):.1f}" y="{_MT + ph + 16}" font-family="sans-serif" font-size="11" '
                     f'text-anchor="middle">{label}</text>')
    if is_rt:
        parts.append(f'<line class="reference" x1="{_ML}" y1="{py(1.0):.2f}" x2="{_ML + pw}" '
                     f'y2="{py(1.0):.2f}" stroke="gray" stroke-dasharray="6,4"/>')
    for when, label in annotations:
        day = (when - start_date).days if isinstance(when, dt.date) and start_date else when
        if isinstance(day, dt.date) or not x_lo <= float(day) <= x_hi:
            log.warning("annotation %r at %s is outside the plotted range; skipped", label, when)
            continue
        xv = px(float(day))
        parts.append(f'<line class="annotation" x1="{xv:.2f}" y1="{_MT}" x2="{xv:.2f}" y2="{_MT + ph}" '
                     f'stroke="#c0392b" stroke-width="1"/>')
        parts.append(f'<text x="{xv + 3:.2f}" y="{_MT + 12}" font-family="sans-serif" font-size="10" '
                     f'fill="#c0392b">{_esc(label)}</text>')
    for k, values in enumerate(ys):
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, values))
        style = 'stroke="#1f77b4" stroke-width="1.5"' if k == 0 else \
            'stroke="#ff7f0e" stroke-width="1.5" stroke-dasharray="4,3"'
        parts.append(f'<polyline fill="none" {style} points="{pts}"/>')
    parts.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(parts) + "\n", encoding="utf-8")
    return path
