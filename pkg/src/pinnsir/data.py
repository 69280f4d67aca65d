"""Case-data ingestion, recovery-queue preprocessing and synthetic datasets."""
from __future__ import annotations

import csv
import datetime as dt
import json
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .sir import CompartmentSeries, SirParams, sir_rk4_simulate

__all__ = [
    "DataError",
    "RawCaseRecord",
    "RegionDataset",
    "RegionMeta",
    "build_region_dataset",
    "derive_susceptible_removed",
    "load_case_csv",
    "load_dataset",
    "load_region_meta",
    "recovery_queue",
    "save_dataset",
    "synth_generate",
]

log = logging.getLogger(__name__)

CASE_COLUMNS = ("date", "region", "new_cases", "new_deaths")
META_COLUMNS = ("region", "population", "vaccination_pct")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class RawCaseRecord:
    date: dt.date
    region: str
    new_cases: float
    new_deaths: float
    filled: bool = False


@dataclass(frozen=True)
class RegionMeta:
    region: str
    population: float
    vaccination_pct: float | None = None


@dataclass
class RegionDataset:
    region_name: str
    N: float
    dates: list[dt.date]
    series: CompartmentSeries
    vaccination_pct: float | None = None
    alpha_exp: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.dates) != len(self.series):
            raise DataError("dates and series lengths differ")
        for a, b in zip(self.dates, self.dates[1:]):
            if (b - a).days != 1:
                raise DataError(f"dates must be consecutive days, found {a} -> {b}")
        if self.vaccination_pct is not None and not 0 <= self.vaccination_pct <= 100:
            raise DataError(f"vaccination_pct out of range: {self.vaccination_pct}")
        s = self.series
        if np.any(s.S < 0) or np.any(s.I < 0) or np.any(s.R < 0):
            raise DataError("compartments must be nonnegative")

    def __len__(self) -> int:
        return len(self.series)

    def to_dict(self) -> dict:
        d = {
            "region": self.region_name,
            "N": self.N,
            "dates": [x.isoformat() for x in self.dates],
            "S": self.series.S.tolist(),
            "I": self.series.I.tolist(),
            "R": self.series.R.tolist(),
        }
        if self.vaccination_pct is not None:
            d["vaccination_pct"] = self.vaccination_pct
        if self.alpha_exp is not None:
            d["alpha_exp"] = self.alpha_exp
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RegionDataset":
        try:
            dates = [dt.date.fromisoformat(x) for x in d["dates"]]
            N = float(d["N"])
            series = CompartmentSeries(np.arange(len(dates), dtype=np.float64),
                                       d["S"], d["I"], d["R"], N)
            return cls(d["region"], N, dates, series, d.get("vaccination_pct"), d.get("alpha_exp"))
        except KeyError as exc:
            raise DataError(f"dataset is missing field {exc}") from None


def save_dataset(dataset: RegionDataset, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(dataset.to_dict(), indent=1) + "\n", encoding="utf-8")
    return path


def load_dataset(path) -> RegionDataset:
    try:
        return RegionDataset.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None


def _parse_count(raw: str, name: str, path, lineno: int) -> float:
    try:
        value = float(raw)
    except (TypeError, ValueError):
        raise DataError(f"{path}:{lineno}: cannot parse {name}={raw!r}") from None
    if not np.isfinite(value):
        raise DataError(f"{path}:{lineno}: {name} is not finite")
    if value < 0:
        raise DataError(f"{path}:{lineno}: negative {name}={raw}")
    return value


def load_case_csv(path) -> list[RawCaseRecord]:
    """Read ``date,region,new_cases,new_deaths`` rows.

    Records come back sorted by (region, date). Calendar gaps inside a region
    are filled with zero-count records marked ``filled=True``.
    """
    by_region: dict[str, dict[dt.date, RawCaseRecord]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CASE_COLUMNS:
            raise DataError(f"{path}:1: expected header {','.join(CASE_COLUMNS)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            raw_date, region, cases, deaths = (c.strip() for c in row)
            try:
                date = dt.date.fromisoformat(raw_date)
            except ValueError:
                raise DataError(f"{path}:{lineno}: invalid date {raw_date!r}") from None
            if not region:
                raise DataError(f"{path}:{lineno}: empty region")
            rec = RawCaseRecord(date, region,
                                _parse_count(cases, "new_cases", path, lineno),
                                _parse_count(deaths, "new_deaths", path, lineno))
            bucket = by_region.setdefault(region, {})
            if date in bucket:
                raise DataError(f"{path}:{lineno}: duplicate entry for {region} on {date}")
            bucket[date] = rec

    records: list[RawCaseRecord] = []
    n_filled = 0
    for region in sorted(by_region):
        bucket = by_region[region]
        day, last = min(bucket), max(bucket)
        while day <= last:
            rec = bucket.get(day)
            if rec is None:
                rec = RawCaseRecord(day, region, 0.0, 0.0, filled=True)
                n_filled += 1
            records.append(rec)
            day += dt.timedelta(days=1)
    if n_filled:
        log.warning("%s: filled %d missing day(s) with zero counts", path, n_filled)
    return records


def load_region_meta(path) -> dict[str, RegionMeta]:
    """Read ``region,population,vaccination_pct`` rows (vaccination may be blank)."""
    out: dict[str, RegionMeta] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not set(META_COLUMNS[:2]) <= set(reader.fieldnames):
            raise DataError(f"{path}:1: expected header {','.join(META_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                pop = float(row["population"])
                vac = row.get("vaccination_pct") or ""
                vac_value = float(vac) if vac.strip() else None
            except ValueError:
                raise DataError(f"{path}:{lineno}: malformed row {row}") from None
            if pop <= 0:
                raise DataError(f"{path}:{lineno}: population must be positive")
            out[row["region"].strip()] = RegionMeta(row["region"].strip(), pop, vac_value)
    return out


def recovery_queue(new_cases: Sequence[float], new_deaths: Sequence[float], recovery_days: int = 14,
                   N: float = 1.0, i0: float = 0.0) -> CompartmentSeries:
    """Turn daily case/death counts into S, I, R via a fixed-length recovery queue.

    Each day's cases (and ``i0`` on day 0) stay infectious for ``recovery_days``
    days, then move to R. Deaths remove queue members immediately, oldest cohort
    first, and count toward R. Deaths exceeding the queue content are dropped.
    """
    cases = np.asarray(new_cases, dtype=np.float64)
    deaths = np.asarray(new_deaths, dtype=np.float64)
    if cases.shape != deaths.shape or cases.ndim != 1:
        raise DataError("new_cases and new_deaths must be 1-d and of equal length")
    if recovery_days < 1:
        raise DataError("recovery_days must be >= 1")
    if np.any(cases < 0) or np.any(deaths < 0) or i0 < 0:
        raise DataError("counts must be nonnegative")
    if i0 + cases.sum() > N:
        raise DataError(f"cumulative cases {i0 + cases.sum():g} exceed population {N:g}")

    T = cases.size
    I = np.empty(T)
    R = np.empty(T)
    queue: deque[list] = deque()  # [birth_day, count], oldest first
    infectious = 0.0
    removed = 0.0
    dropped_deaths = 0.0
    for day in range(T):
        while queue and day - queue[0][0] >= recovery_days:
            _, count = queue.popleft()
            infectious -= count
            removed += count
        arrivals = cases[day] + (i0 if day == 0 else 0.0)
        if arrivals:
            queue.append([day, arrivals])
            infectious += arrivals
        to_kill = deaths[day]
        while to_kill > 0 and queue:
            cohort = queue[0]
            taken = min(cohort[1], to_kill)
            cohort[1] -= taken
            to_kill -= taken
            infectious -= taken
            removed += taken
            if cohort[1] <= 0:
                queue.popleft()
        dropped_deaths += to_kill
        I[day] = max(infectious, 0.0)
        R[day] = removed
    if dropped_deaths:
        log.warning("recovery_queue: %g death(s) exceeded queued cases and were dropped", dropped_deaths)
    return CompartmentSeries(np.arange(T, dtype=np.float64), N - I - R, I, R, N)


def derive_susceptible_removed(I_series: Sequence[float], alpha: float, N: float,
                               i0: float | None = None) -> CompartmentSeries:
    """Rebuild R by trapezoidal integration of dR/dt = alpha * I, then S = N - I - R.

    ``i0`` optionally overrides the first infectious value.
    """
    I = np.array(I_series, dtype=np.float64)
    if I.ndim != 1 or I.size == 0:
        raise DataError("I_series must be a nonempty 1-d sequence")
    if i0 is not None:
        I[0] = i0
    if np.any(I < 0):
        raise DataError("I_series must be nonnegative")
    R = np.zeros_like(I)
    R[1:] = np.cumsum(0.5 * alpha * (I[1:] + I[:-1]))
    S = N - I - R
    if np.any(S < 0):
        raise DataError("reconstructed susceptible compartment became negative")
    return CompartmentSeries(np.arange(I.size, dtype=np.float64), S, I, R, N)


def synth_generate(params: SirParams, i0: float, days: int, noise_std: float = 0.0, seed: int = 0,
                   *, steps_per_day: int = 10, region_name: str = "synthetic",
                   start: dt.date = dt.date(2020, 3, 9)) -> RegionDataset:
    """RK4 trajectory with optional multiplicative Gaussian noise on I.

    With noise, S is re-derived as N - I - R so the population stays conserved.
    """
    if noise_std < 0:
        raise ValueError("noise_std must be nonnegative")
    clean = sir_rk4_simulate(params, params.N - i0, i0, 0.0, days, steps_per_day)
    series = clean
    if noise_std > 0:
        rng = np.random.default_rng(seed)
        I = np.clip(clean.I * (1.0 + noise_std * rng.standard_normal(clean.I.size)), 0.0, None)
        series = CompartmentSeries(clean.t, params.N - I - clean.R, I, clean.R, params.N)
    dates = [start + dt.timedelta(days=k) for k in range(len(series))]
    return RegionDataset(region_name, params.N, dates, series,
                         meta={"alpha": params.alpha, "beta": params.beta, "noise_std": noise_std})


def _region_records(records: Iterable[RawCaseRecord], region: str) -> list[RawCaseRecord]:
    return sorted((r for r in records if r.region == region), key=lambda r: r.date)


def build_region_dataset(records: Iterable[RawCaseRecord], region: str, population: float, *,
                         start: dt.date | None = None, end: dt.date | None = None,
                         recovery_days: int = 14, i0: float = 0.0,
                         vaccination_pct: float | None = None,
                         death_records: Iterable[RawCaseRecord] | None = None) -> RegionDataset:
    """Window a region's records to [start, end] and run the recovery queue.

    ``death_records`` lets deaths come from another region's rows (for example,
    national deaths applied to a national case series); otherwise the region's
    own ``new_deaths`` column is used.
    """
    rows = _region_records(records, region)
    if start is not None:
        rows = [r for r in rows if r.date >= start]
    if end is not None:
        rows = [r for r in rows if r.date <= end]
    if not rows:
        raise DataError(f"no records for region {region!r} in the requested window")
    dates = [r.date for r in rows]
    cases = [r.new_cases for r in rows]
    if death_records is None:
        deaths = [r.new_deaths for r in rows]
    else:
        lookup = {r.date: r.new_deaths for r in death_records}
        deaths = [lookup.get(d, 0.0) for d in dates]
    series = recovery_queue(cases, deaths, recovery_days, population, i0)
    return RegionDataset(region, population, dates, series, vaccination_pct,
                         meta={"recovery_days": recovery_days})
