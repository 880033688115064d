"""Case/plan ingestion, smoothing, plan encoding, windowing and the synthetic generator.

Two delimiter-separated input formats are supported::

    region,date,confirmed          # daily new cases (or cumulative, see ingest_cases)
    region,plan,start,end          # response-plan intervals; empty end = still active

Each region becomes one client dataset: counts are gap-filled, smoothed with a
trailing 7-day mean, compressed with log1p, min-max scaled to [0, 1], and cut
into windows of 14 history days + 7 forecast days. The log step keeps
exponential growth and decay phases on a comparable scale.
"""

from __future__ import annotations

import csv
import datetime as dt
import math
import warnings
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .model import Sample
from .numerics import SeededRng, derive_seed

HISTORY_LEN = 14
HORIZON = 7
MIN_SPAN = HISTORY_LEN + HORIZON

DEFAULT_PLANS = (
    "domestic travel limitations",
    "gatherings limits",
    "stay at home",
    "nonessential business closures",
    "reopening plans",
    "statewide mask policy",
)

SYNTHETIC_START = dt.date(2020, 3, 1)


class DataWarning(UserWarning):
    pass


@dataclass(frozen=True)
class DailyRecord:
    region: str
    date: dt.date
    confirmed: float


@dataclass(frozen=True)
class PlanInterval:
    region: str
    plan_name: str
    start: dt.date
    end: dt.date | None = None  # None: open-ended

    def __post_init__(self) -> None:
        if self.end is not None and self.end < self.start:
            raise DataError(f"plan {self.plan_name!r} in {self.region} ends ({self.end}) before it starts ({self.start})")

    def active_on(self, day: dt.date) -> bool:
        return self.start <= day and (self.end is None or day <= self.end)


@dataclass(frozen=True)
class PlanCatalog:
    names: tuple[str, ...] = DEFAULT_PLANS

    def __post_init__(self) -> None:
        object.__setattr__(self, "names", tuple(self.names))
        if not self.names:
            raise ConfigError("plan catalog is empty")
        if len(set(self.names)) != len(self.names):
            raise ConfigError("plan catalog names must be unique")

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ConfigError(f"plan {name!r} is not in the catalog {list(self.names)}") from None


@dataclass(frozen=True)
class Scaler:
    min: float
    max: float

    def transform(self, values) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - self.min) / (self.max - self.min)

    def inverse(self, scaled) -> np.ndarray:
        return np.asarray(scaled, dtype=np.float64) * (self.max - self.min) + self.min


@dataclass
class ClientDataset:
    region: str
    samples: list[Sample]
    scaler: Scaler
    dates: list[dt.date] = field(default_factory=list)  # anchor day t of each window

    @property
    def m(self) -> int:
        return len(self.samples)

    def __len__(self) -> int:
        return len(self.samples)


# --------------------------------------------------------------------------
# Ingestion
# --------------------------------------------------------------------------

def _parse_date(text: str, line: int, column: str) -> dt.date:
    try:
        return dt.date.fromisoformat(text.strip())
    except ValueError:
        raise DataError(f"invalid {column} date {text!r}", line=line) from None


def _read_rows(path: str | Path, header: Sequence[str], delimiter: str) -> Iterable[tuple[int, dict[str, str]]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            first = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, expected header {','.join(header)}", line=1) from None
        columns = [c.strip().lower() for c in first]
        missing = [h for h in header if h not in columns]
        if missing:
            raise DataError(f"{path}: header is missing column(s) {missing}", line=1)
        pos = {h: columns.index(h) for h in header}
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < len(columns):
                row = row + [""] * (len(columns) - len(row))
            yield line, {h: row[i].strip() for h, i in pos.items()}


def ingest_cases(path: str | Path, delimiter: str = ",", cumulative: bool = False) -> list[DailyRecord]:
    """Read ``region,date,confirmed`` rows, sorted by (region, date).

    Duplicate (region, date) rows keep the last value and emit a DataWarning.
    With ``cumulative=True`` each region's series is differenced into daily
    counts; negative differences (reporting corrections) are clipped to 0.
    """
    by_key: dict[tuple[str, dt.date], float] = {}
    for line, row in _read_rows(path, ("region", "date", "confirmed"), delimiter):
        region = row["region"]
        if not region:
            raise DataError("empty region", line=line)
        day = _parse_date(row["date"], line, "date")
        try:
            count = float(row["confirmed"])
        except ValueError:
            raise DataError(f"invalid count {row['confirmed']!r}", line=line) from None
        if not math.isfinite(count) or count < 0:
            raise DataError(f"count must be a non-negative number, got {row['confirmed']!r}", line=line)
        if (region, day) in by_key:
            warnings.warn(f"line {line}: duplicate record for ({region}, {day}); keeping the later value",
                          DataWarning, stacklevel=2)
        by_key[(region, day)] = count
    records = [DailyRecord(r, d, c) for (r, d), c in sorted(by_key.items())]
    if cumulative:
        records = _difference(records)
    return records


def _difference(records: list[DailyRecord]) -> list[DailyRecord]:
    out = []
    prev: DailyRecord | None = None
    for rec in records:
        if prev is None or prev.region != rec.region:
            out.append(rec)
        else:
            out.append(DailyRecord(rec.region, rec.date, max(rec.confirmed - prev.confirmed, 0.0)))
        prev = rec
    return out


def ingest_actions(path: str | Path, delimiter: str = ",") -> list[PlanInterval]:
    """Read ``region,plan,start,end`` rows; an empty ``end`` is an open interval."""
    out = []
    for line, row in _read_rows(path, ("region", "plan", "start", "end"), delimiter):
        if not row["region"] or not row["plan"]:
            raise DataError("region and plan must be non-empty", line=line)
        start = _parse_date(row["start"], line, "start")
        end = _parse_date(row["end"], line, "end") if row["end"] else None
        if end is not None and end < start:
            raise DataError(f"end {end} is before start {start}", line=line)
        out.append(PlanInterval(row["region"], row["plan"], start, end))
    out.sort(key=lambda p: (p.region, p.start, p.plan_name))
    return out


# --------------------------------------------------------------------------
# Transformations
# --------------------------------------------------------------------------

def moving_average(series: Sequence[float], window: int = 7) -> np.ndarray:
    """Trailing mean over the last ``window`` values; shorter at the left edge."""
    if window < 1:
        raise ConfigError("window must be >= 1")
    values = [float(v) for v in series]
    out = np.empty(len(values), dtype=np.float64)
    for t in range(len(values)):
        lo = max(0, t - window + 1)
        acc = 0.0
        for v in values[lo:t + 1]:
            acc += v
        out[t] = acc / (t + 1 - lo)
    return out


def encode_plan_vector(day: dt.date, intervals: Iterable[PlanInterval], catalog: PlanCatalog) -> np.ndarray:
    """Multi-hot vector: coordinate k is 1 if plan k is active on ``day`` (bounds inclusive)."""
    vec = np.zeros(len(catalog), dtype=np.float64)
    for iv in intervals:
        k = catalog.index(iv.plan_name)
        if iv.active_on(day):
            vec[k] = 1.0
    return vec


def normalize(series: Sequence[float]) -> tuple[np.ndarray, Scaler]:
    """Min-max scale to [0, 1]. A constant series maps to zeros with scaler (min, min + 1)."""
    arr = np.asarray(series, dtype=np.float64)
    if arr.size == 0:
        return arr.copy(), Scaler(0.0, 1.0)
    lo, hi = float(arr.min()), float(arr.max())
    scaler = Scaler(lo, hi) if hi > lo else Scaler(lo, lo + 1.0)
    return scaler.transform(arr), scaler


def _fill_gaps(records: Sequence[DailyRecord]) -> tuple[list[dt.date], np.ndarray]:
    """Contiguous daily series; missing days are linearly interpolated."""
    records = sorted(records, key=lambda r: r.date)
    first, last = records[0].date, records[-1].date
    n = (last - first).days + 1
    known_x = np.array([(r.date - first).days for r in records], dtype=np.float64)
    known_y = np.array([r.confirmed for r in records], dtype=np.float64)
    values = np.interp(np.arange(n, dtype=np.float64), known_x, known_y)
    dates = [first + dt.timedelta(days=i) for i in range(n)]
    return dates, values


def build_samples(records: Sequence[DailyRecord], intervals: Iterable[PlanInterval],
                  catalog: PlanCatalog, window: int = 7, log_scale: bool = True) -> ClientDataset:
    """Turn one region's records and plan intervals into windowed samples.

    Every day ``t`` with 13 days before it and 7 after yields a sample whose
    history covers t-13..t and whose targets and future plans cover t+1..t+7.
    """
    regions = {r.region for r in records}
    if len(regions) > 1:
        raise DataError(f"build_samples expects one region, got {sorted(regions)}")
    region = next(iter(regions)) if regions else ""
    intervals = [iv for iv in intervals if iv.region == region]
    for iv in intervals:
        catalog.index(iv.plan_name)
    if not records:
        warnings.warn(f"{region or '<empty>'}: no records", DataWarning, stacklevel=2)
        return ClientDataset(region, [], Scaler(0.0, 1.0))

    dates, counts = _fill_gaps(records)
    smoothed = moving_average(counts, window)
    if log_scale:
        smoothed = np.log1p(smoothed)
    scaled, scaler = normalize(smoothed)
    if len(dates) < MIN_SPAN:
        warnings.warn(f"{region}: {len(dates)} days is shorter than the {MIN_SPAN}-day window; no samples",
                      DataWarning, stacklevel=2)
        return ClientDataset(region, [], scaler)

    plans = np.stack([encode_plan_vector(d, intervals, catalog) for d in dates])
    features = np.concatenate([scaled[:, None], plans], axis=1)
    samples, anchors = [], []
    for t in range(HISTORY_LEN - 1, len(dates) - HORIZON):
        samples.append(Sample(
            history=features[t - HISTORY_LEN + 1:t + 1].copy(),
            future_plans=plans[t + 1:t + 1 + HORIZON].copy(),
            targets=scaled[t + 1:t + 1 + HORIZON].copy(),
        ))
        anchors.append(dates[t])
    return ClientDataset(region, samples, scaler, anchors)


def build_client_datasets(records: Sequence[DailyRecord], intervals: Sequence[PlanInterval],
                          catalog: PlanCatalog) -> list[ClientDataset]:
    """One dataset per region, in sorted region order."""
    by_region: dict[str, list[DailyRecord]] = {}
    for rec in records:
        by_region.setdefault(rec.region, []).append(rec)
    return [build_samples(by_region[r], intervals, catalog) for r in sorted(by_region)]


def train_test_split(dataset: ClientDataset, test_fraction: float = 0.2) -> tuple[ClientDataset, ClientDataset]:
    """Chronological split: the last ceil(test_fraction * m) samples are the test set."""
    if not 0.0 <= test_fraction <= 1.0:
        raise ConfigError("test_fraction must lie in [0, 1]")
    m = dataset.m
    n_test = min(m, math.ceil(round(test_fraction * m, 9)))
    cut = m - n_test
    dates = dataset.dates or [None] * m

    def part(lo: int, hi: int) -> ClientDataset:
        return ClientDataset(dataset.region, dataset.samples[lo:hi], dataset.scaler,
                             [d for d in dates[lo:hi] if d is not None])

    return part(0, cut), part(cut, m)


# --------------------------------------------------------------------------
# Synthetic epidemics
# --------------------------------------------------------------------------

@dataclass
class SyntheticClient:
    """Ground truth behind one synthetic region, kept for inspection and tests."""

    region: str
    initial: float
    growth: float
    schedule: np.ndarray  # (days, K) 0/1 activity
    noise: np.ndarray     # (days,)
    counts: np.ndarray    # (days,)


def next_count(count: float, growth: float, effects: np.ndarray, active: np.ndarray, noise: float) -> float:
    """c[t+1] = c[t] * exp(growth - sum_k effects[k] * active[k]) * (1 + noise)."""
    return count * math.exp(growth - float(np.dot(effects, active))) * (1.0 + noise)


def simulate_counts(initial: float, growth: float, effects: Sequence[float],
                    schedule: np.ndarray, noise: Sequence[float]) -> np.ndarray:
    """Daily counts under a fixed (days, K) 0/1 plan schedule."""
    schedule = np.asarray(schedule, dtype=np.float64)
    effects = np.asarray(effects, dtype=np.float64)
    counts = np.empty(schedule.shape[0], dtype=np.float64)
    counts[0] = initial
    for t in range(schedule.shape[0] - 1):
        counts[t + 1] = next_count(counts[t], growth, effects, schedule[t], noise[t])
    return counts


@dataclass
class _PlanPolicy:
    """Hysteresis trigger for one plan: on above ``upper``, off below ``lower``.

    Once switched on a plan stays on for at least ``min_days``; after it is
    lifted it cannot return for ``cooldown`` days. While the level sits inside
    the band, a small daily probability of a spontaneous activation keeps
    plan status from being a pure function of the case level. Below ``lower``
    nothing switches on, which keeps long series from drifting to zero.
    """

    upper: float
    lower: float
    remaining: int = 0
    cooldown: int = 0
    active: bool = False


SPONTANEOUS_RATE = 0.03


def simulate_reactive(rng: SeededRng, initial: float, growth: float, effects: Sequence[float],
                      days: int, noise: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Counts and the plan schedule they trigger; returns ``(counts, schedule)``."""
    effects = np.asarray(effects, dtype=np.float64)
    policies = []
    for _ in effects:
        upper = initial * math.exp(rng.uniform(0.3, 2.0))
        policies.append(_PlanPolicy(upper, upper * math.exp(-rng.uniform(0.5, 1.5))))
    schedule = np.zeros((days, len(effects)), dtype=np.float64)
    counts = np.empty(days, dtype=np.float64)
    counts[0] = initial
    for t in range(days):
        c = counts[t]
        for k, pol in enumerate(policies):
            if pol.active:
                pol.remaining -= 1
                if pol.remaining <= 0 and c < pol.lower:
                    pol.active = False
                    pol.cooldown = rng.randrange(6)
            elif pol.cooldown > 0:
                pol.cooldown -= 1
            elif c > pol.upper or (c > pol.lower and rng.random() < SPONTANEOUS_RATE):
                pol.active = True
                pol.remaining = 2 + rng.randrange(4)
            schedule[t, k] = 1.0 if pol.active else 0.0
        if t + 1 < days:
            counts[t + 1] = next_count(c, growth, effects, schedule[t], noise[t])
    return counts, schedule


def synthesize_client(index: int, days: int, catalog: PlanCatalog, effects: Sequence[float],
                      seed: int) -> SyntheticClient:
    rng = SeededRng(derive_seed(seed, "client", index))
    initial = rng.uniform(20.0, 100.0)
    growth = rng.uniform(0.02, 0.12)
    noise = np.array([rng.uniform(-0.02, 0.02) for _ in range(days)], dtype=np.float64)
    counts, schedule = simulate_reactive(rng, initial, growth, effects, days, noise)
    return SyntheticClient(f"client{index:02d}", initial, growth, schedule, noise, counts)


def shared_effects(catalog: PlanCatalog, seed: int) -> list[float]:
    rng = SeededRng(derive_seed(seed, "effects"))
    return [rng.uniform(0.01, 0.08) for _ in catalog.names]


def synthetic_to_records(client: SyntheticClient, catalog: PlanCatalog,
                         start: dt.date = SYNTHETIC_START) -> tuple[list[DailyRecord], list[PlanInterval]]:
    days = len(client.counts)
    records = [DailyRecord(client.region, start + dt.timedelta(days=t), float(client.counts[t]))
               for t in range(days)]
    intervals = []
    for k, name in enumerate(catalog.names):
        active = client.schedule[:, k]
        t = 0
        while t < days:
            if active[t]:
                lo = t
                while t + 1 < days and active[t + 1]:
                    t += 1
                intervals.append(PlanInterval(client.region, name, start + dt.timedelta(days=lo),
                                              start + dt.timedelta(days=t)))
            t += 1
    return records, intervals


def gen_synthetic(n_clients: int, days: int, catalog: PlanCatalog | None = None, seed: int = 0,
                  effects: Sequence[float] | None = None) -> list[ClientDataset]:
    """Seeded shared-dynamics epidemics, one ClientDataset per client.

    Clients differ in start level, growth rate, plan schedule and noise but
    share the plan effect sizes. Client ``i`` depends only on ``(seed, i)``,
    so the first N clients are identical whatever ``n_clients`` is.
    """
    catalog = catalog or PlanCatalog()
    if n_clients < 1:
        raise ConfigError("n_clients must be >= 1")
    if days < MIN_SPAN:
        raise ConfigError(f"days must be >= {MIN_SPAN}, got {days}")
    if effects is None:
        effects = shared_effects(catalog, seed)
    elif len(effects) != len(catalog):
        raise ConfigError(f"expected {len(catalog)} plan effects, got {len(effects)}")
    out = []
    for i in range(n_clients):
        client = synthesize_client(i, days, catalog, effects, seed)
        records, intervals = synthetic_to_records(client, catalog)
        out.append(build_samples(records, intervals, catalog))
    return out
