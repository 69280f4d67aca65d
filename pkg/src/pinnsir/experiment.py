"""Batch driver: repeated fits per region, aggregation, correlations, artifacts."""
from __future__ import annotations

import dataclasses
import datetime as dt
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .data import (
    DataError,
    RegionDataset,
    build_region_dataset,
    load_case_csv,
    load_dataset,
    load_region_meta,
    save_dataset,
    synth_generate,
)
from .inverse_rt import RtFitConfig, fit_rt
from .inverse_sir import fit_sir
from .net import NetworkConfig, TrainConfig, TrainingError
from .report import (
    AggregateResult,
    Correlation,
    RegionAggregate,
    StatisticsError,
    emit_plot,
    emit_report,
    load_published_tables,
    mean_std,
    pearson,
    slugify,
)
from .sir import CompartmentSeries, RtSeries, SirParams

__all__ = ["ConfigError", "ExperimentConfig", "run_experiment", "write_artifacts"]

log = logging.getLogger(__name__)

MODES = ("fit_sir", "fit_rt", "simulate", "report")


class ConfigError(ValueError):
    pass


def _parse_date(value) -> dt.date | None:
    if value is None or isinstance(value, dt.date):
        return value
    try:
        return dt.date.fromisoformat(value)
    except ValueError:
        raise ConfigError(f"invalid date {value!r}") from None


@dataclass
class ExperimentConfig:
    mode: str
    regions: list[str] = field(default_factory=list)
    repetitions: int = 10
    base_seed: int = 0
    workers: int = 1
    output_dir: str = "results"
    # inputs: dataset JSON files, or a case CSV plus region metadata
    datasets: list[str] = field(default_factory=list)
    cases_csv: str | None = None
    regions_csv: str | None = None
    deaths_region: str | None = None
    start: str | None = None
    end: str | None = None
    recovery_days: int = 14
    tables: str | None = None
    # solver settings
    net: dict[str, Any] = field(default_factory=dict)
    train: dict[str, Any] = field(default_factory=dict)
    rt: dict[str, Any] = field(default_factory=dict)
    scaling: str = "range"
    fixed_alpha: float | None = None
    rt_alphas: list[str] = field(default_factory=lambda: ["fixed"])
    params_csv: str | None = None
    synthetic: dict[str, Any] = field(default_factory=dict)
    correlation_exclude: list[str] = field(default_factory=lambda: ["Germany"])
    annotations: list[list[str]] = field(default_factory=list)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.mode in ("fit_sir", "fit_rt") and not (self.datasets or self.cases_csv):
            raise ConfigError(f"{self.mode} needs 'datasets' or 'cases_csv'")
        if self.cases_csv and not self.regions_csv:
            raise ConfigError("'cases_csv' requires 'regions_csv' for populations")
        if self.mode == "simulate" and not self.regions:
            raise ConfigError("simulate needs at least one region name")
        for label in self.rt_alphas:
            if label not in ("fixed", "exp"):
                raise ConfigError(f"rt_alphas entries must be 'fixed' or 'exp', got {label!r}")
        _parse_date(self.start)
        _parse_date(self.end)
        try:
            self.net_config()
            self.train_config()
            self.rt_config()
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def net_config(self, seed: int = 0) -> NetworkConfig:
        defaults = {"output_dim": 3} if self.mode != "fit_rt" else {"output_dim": 2, "activation": "relu"}
        cfg = NetworkConfig(**{**defaults, **self.net, "seed": seed})
        cfg.validate()
        return cfg

    def train_config(self) -> TrainConfig:
        cfg = TrainConfig(**self.train)
        cfg.validate()
        return cfg

    def rt_config(self, alpha: float | None = None) -> RtFitConfig:
        kw = dict(self.rt)
        if "window" in kw and kw["window"] is not None:
            kw["window"] = tuple(kw["window"])
        if alpha is not None:
            kw["alpha"] = alpha
        cfg = RtFitConfig(**kw)
        cfg.validate()
        return cfg


# --- dataset resolution ----------------------------------------------------

def _alpha_exp_lookup(path) -> dict[str, float]:
    import csv

    with open(path, newline="", encoding="utf-8") as fh:
        return {row["region"]: float(row["alpha_mean"]) for row in csv.DictReader(fh)}


def resolve_datasets(config: ExperimentConfig) -> list[RegionDataset]:
    if config.mode == "simulate":
        syn = {"alpha": 0.07, "beta": 0.22658, "N": 7e7, "i0": 15.0, "days": 35, "noise_std": 0.0,
               **config.synthetic}
        params = SirParams(syn["alpha"], syn["beta"], syn["N"])
        return [synth_generate(params, syn["i0"], int(syn["days"]), syn["noise_std"],
                               config.base_seed + k, region_name=name,
                               start=_parse_date(syn.get("start")) or dt.date(2020, 3, 9))
                for k, name in enumerate(config.regions)]

    found: list[RegionDataset] = [load_dataset(p) for p in config.datasets]
    if config.cases_csv:
        records = load_case_csv(config.cases_csv)
        meta = load_region_meta(config.regions_csv)
        available = sorted({r.region for r in records})
        wanted = config.regions or [r for r in available if r in meta]
        death_rows = None
        if config.deaths_region:
            death_rows = [r for r in records if r.region == config.deaths_region]
        for name in wanted:
            if name not in meta:
                raise DataError(f"region {name!r} missing from {config.regions_csv}")
            found.append(build_region_dataset(
                records, name, meta[name].population, start=_parse_date(config.start),
                end=_parse_date(config.end), recovery_days=config.recovery_days,
                vaccination_pct=meta[name].vaccination_pct, death_records=death_rows))
    if config.regions:
        by_name = {d.region_name: d for d in found}
        missing = [r for r in config.regions if r not in by_name]
        if missing:
            raise DataError(f"no data for region(s) {missing}")
        found = [by_name[r] for r in config.regions]
    if not found:
        raise DataError("no regions resolved from the configured inputs")
    if config.params_csv:
        lookup = _alpha_exp_lookup(config.params_csv)
        for d in found:
            if d.region_name in lookup:
                d.alpha_exp = lookup[d.region_name]
    return found


# --- per-fit jobs (top level so worker processes can pickle them) -----------

def _sir_job(args):
    dataset_dict, config_dict, seed = args
    config = ExperimentConfig(**config_dict)
    dataset = RegionDataset.from_dict(dataset_dict)
    try:
        res = fit_sir(dataset, config.net_config(seed), config.train_config(), scaling=config.scaling,
                      fixed_alpha=config.fixed_alpha)
    except TrainingError as exc:
        return {"seed": seed, "error": str(exc)}
    return {"seed": seed, "alpha": res.alpha_hat, "beta": res.beta_hat,
            "final_data_loss": res.final_data_loss, "final_physics_loss": res.final_physics_loss,
            "warnings": res.warnings, "fitted_I": res.predict_counts()[:, 1].tolist()}


def _rt_job(args):
    dataset_dict, config_dict, seed, label, alpha = args
    config = ExperimentConfig(**config_dict)
    dataset = RegionDataset.from_dict(dataset_dict)
    try:
        res = fit_rt(dataset, config.rt_config(alpha), config.net_config(seed))
    except TrainingError as exc:
        return {"seed": seed, "alpha_label": label, "error": str(exc)}
    return {"seed": seed, "alpha_label": label, "alpha": alpha,
            "days_above_one": res.summary.days_above_one, "peak_rt": res.summary.peak_rt,
            "stage1_data_loss": res.stage1_data_loss, "final_data_loss": res.final_data_loss,
            "final_physics_loss": res.final_physics_loss,
            "day": res.series.t.tolist(), "rt": res.series.rt.tolist()}


def _run_jobs(fn, jobs: list, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


# --- modes -----------------------------------------------------------------

def _correlate(rows: list[RegionAggregate], key: str, exclude, pair: str) -> Correlation | None:
    pts = [(r.mean(key), r.vaccination_pct) for r in rows
           if r.vaccination_pct is not None and r.region not in exclude and key in r.stats]
    if len(pts) < 3:
        return None
    try:
        r, p = pearson([a for a, _ in pts], [b for _, b in pts])
    except StatisticsError as exc:
        log.warning("correlation %s skipped: %s", pair, exc)
        return None
    return Correlation(pair, r, p, len(pts))


def _fit_sir_mode(config: ExperimentConfig, datasets: list[RegionDataset]) -> AggregateResult:
    cfg_dict = dataclasses.asdict(config)
    jobs = [(d.to_dict(), cfg_dict, config.base_seed + k) for d in datasets for k in range(config.repetitions)]
    outputs = _run_jobs(_sir_job, jobs, config.workers)
    result = AggregateResult("fit_sir", [])
    for i, d in enumerate(datasets):
        runs = outputs[i * config.repetitions:(i + 1) * config.repetitions]
        good = [r for r in runs if "error" not in r]
        result.errors += [f"{d.region_name} seed {r['seed']}: {r['error']}" for r in runs if "error" in r]
        fitted = good[0].pop("fitted_I") if good else None
        for r in good[1:]:
            r.pop("fitted_I", None)
        if not good:
            continue
        row = RegionAggregate.from_runs(d.region_name, good, ("alpha", "beta"), N=d.N,
                                        vaccination_pct=d.vaccination_pct)
        result.rows.append(row)
        d.alpha_exp = row.mean("alpha")
        result.artifacts[d.region_name] = {"dataset": d, "fitted_I": fitted}
    for key in ("beta", "alpha"):
        c = _correlate(result.rows, key, config.correlation_exclude, f"{key}~vaccination_pct")
        if c:
            result.correlations.append(c)
    return result


def _fit_rt_mode(config: ExperimentConfig, datasets: list[RegionDataset]) -> AggregateResult:
    cfg_dict = dataclasses.asdict(config)
    jobs = []
    for d in datasets:
        for label in config.rt_alphas:
            if label == "fixed":
                alpha = config.rt_config().alpha
            else:
                if d.alpha_exp is None:
                    raise DataError(f"{d.region_name}: alpha_exp unavailable; run fit_sir first or "
                                    "set 'params_csv'")
                alpha = d.alpha_exp
            for k in range(config.repetitions):
                jobs.append((d.to_dict(), cfg_dict, config.base_seed + k, label, alpha))
    outputs = _run_jobs(_rt_job, jobs, config.workers)
    result = AggregateResult("fit_rt", [])
    per_region = config.repetitions * len(config.rt_alphas)
    for i, d in enumerate(datasets):
        runs = outputs[i * per_region:(i + 1) * per_region]
        result.errors += [f"{d.region_name} {r['alpha_label']} seed {r['seed']}: {r['error']}"
                          for r in runs if "error" in r]
        good = [r for r in runs if "error" not in r]
        if not good:
            continue
        row = RegionAggregate(d.region_name, d.N, d.vaccination_pct)
        cols: dict[str, Any] = {}
        for label in config.rt_alphas:
            sel = [r for r in good if r["alpha_label"] == label]
            if not sel:
                continue
            for key in ("alpha", "days_above_one", "peak_rt"):
                row.stats[f"{key}@{label}"] = mean_std(r[key] for r in sel)
            rt = np.array([r["rt"] for r in sel])
            day = np.asarray(sel[0]["day"])
            cols.setdefault("day", day)
            cols.setdefault("date", [(d.dates[0] + dt.timedelta(days=int(x))).isoformat() for x in day])
            cols[f"rt_mean_{label}"] = rt.mean(axis=0)
            cols[f"rt_std_{label}"] = rt.std(axis=0)
        for r in good:
            del r["rt"], r["day"]
        row.runs = good
        result.rows.append(row)
        result.series[d.region_name] = cols
    for label in config.rt_alphas:
        c = _correlate(result.rows, f"peak_rt@{label}", config.correlation_exclude,
                       f"peak_rt@{label}~vaccination_pct")
        if c:
            result.correlations.append(c)
    return result


def _simulate_mode(config: ExperimentConfig, datasets: list[RegionDataset]) -> AggregateResult:
    result = AggregateResult("simulate", [])
    for d in datasets:
        s = d.series
        runs = [{"seed": config.base_seed, "peak_I": float(s.I.max()), "final_R": float(s.R[-1]),
                 "final_S": float(s.S[-1])}]
        result.rows.append(RegionAggregate.from_runs(d.region_name, runs, ("peak_I", "final_R", "final_S"),
                                                     N=d.N, vaccination_pct=d.vaccination_pct))
        result.artifacts[d.region_name] = {"dataset": d}
    return result


def _report_mode(config: ExperimentConfig) -> AggregateResult:
    rows = load_published_tables(config.tables)
    if config.regions:
        rows = [r for r in rows if r["region"] in config.regions]
    if not rows:
        raise DataError("no regions selected from the tables")
    result = AggregateResult("report", [])
    for r in rows:
        stats = {
            "alpha": (r["alpha"], r["alpha_std"]),
            "beta": (r["beta"], r["beta_std"]),
            "alpha@alpha_14": (1.0 / 14.0, 0.0),
            "days_above_one@alpha_14": (r["days_above_one_alpha_14"], 0.0),
            "peak_rt@alpha_14": (r["peak_rt_alpha_14"], 0.0),
            "alpha@exp": (r["alpha"], 0.0),
            "days_above_one@exp": (r["days_above_one_alpha_exp"], 0.0),
            "peak_rt@exp": (r["peak_rt_alpha_exp"], 0.0),
        }
        result.rows.append(RegionAggregate(r["region"], r["population_millions"] * 1e6,
                                           r["vaccination_pct"], stats, []))
    exclude = set(config.correlation_exclude) | {r["region"] for r in rows if r["level"] == "country"}
    for key in ("beta", "alpha", "peak_rt@alpha_14", "peak_rt@exp"):
        c = _correlate(result.rows, key, exclude, f"{key}~vaccination_pct")
        if c:
            result.correlations.append(c)
    return result


def run_experiment(config: ExperimentConfig, *, write: bool = True) -> AggregateResult:
    """Run ``config.repetitions`` fits per region (seed = base_seed + k) and aggregate.

    Training failures are collected in ``result.errors``; data problems raise.
    """
    config.validate()
    if config.mode == "report":
        result = _report_mode(config)
    else:
        datasets = resolve_datasets(config)
        if config.mode == "fit_sir":
            result = _fit_sir_mode(config, datasets)
        elif config.mode == "fit_rt":
            result = _fit_rt_mode(config, datasets)
        else:
            result = _simulate_mode(config, datasets)
    for e in result.errors:
        log.error("training failure: %s", e)
    if write:
        write_artifacts(result, config)
    return result


def write_artifacts(result: AggregateResult, config: ExperimentConfig) -> list[Path]:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    annotations = [(_parse_date(w), label) for w, label in config.annotations]
    written: list[Path] = []
    if result.rows:
        written += emit_report(result, out, "csv")
        written += emit_report(result, out, "json")
    for region, info in result.artifacts.items():
        d: RegionDataset = info["dataset"]
        (out / "datasets").mkdir(exist_ok=True)
        written.append(save_dataset(d, out / "datasets" / f"{slugify(region)}.json"))
        written.append(emit_plot(d.series, out / f"{result.mode}_{slugify(region)}.svg", annotations,
                                 start_date=d.dates[0], title=f"{region}: infectious",
                                 overlay=info.get("fitted_I")))
    for region, cols in result.series.items():
        start = dt.date.fromisoformat(cols["date"][0])
        for key in cols:
            if key.startswith("rt_mean_"):
                label = key[len("rt_mean_"):]
                alpha = result.row(region).mean(f"alpha@{label}")
                series = RtSeries(cols["day"], cols[key], alpha)
                written.append(emit_plot(series, out / f"rt_{slugify(region)}_{label}.svg", annotations,
                                         start_date=start - dt.timedelta(days=int(cols["day"][0])),
                                         title=f"{region}: Rt (alpha={alpha:.4g})"))
    return written
