"""Trip ingestion, demand aggregation and the synthetic demand generator."""

from __future__ import annotations

import csv
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import OUT_OF_AREA, DemandTensor, RegionGrid, TripRecord, region_of

logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = (
    "order_id",
    "bike_id",
    "user_id",
    "start_time",
    "start_lng",
    "start_lat",
    "end_time",
    "end_lng",
    "end_lat",
)
MINUTES_PER_CELL = 4


@dataclass
class ParseReport:
    rows: int = 0
    kept: int = 0
    dropped: Counter = field(default_factory=Counter)

    @property
    def n_dropped(self) -> int:
        return sum(self.dropped.values())


def _parse_minute(text: str) -> np.datetime64:
    ts = datetime.fromisoformat(text.strip())
    if ts.tzinfo is not None:
        ts = ts.replace(tzinfo=None)
    return np.datetime64(ts, "m")


def parse_trajectories(path: str | Path, grid: RegionGrid) -> tuple[list[TripRecord], ParseReport]:
    """Read a trip CSV, keeping well-formed rows whose endpoints fall in ``grid``.

    Dropped rows are tallied by reason in the returned report. A ``trace``
    column is accepted and ignored.
    """
    path = Path(path)
    report = ParseReport()
    trips: list[TripRecord] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise ValueError(f"{path}: missing required columns {missing}")
        for row in reader:
            report.rows += 1
            try:
                start = _parse_minute(row["start_time"])
                end = _parse_minute(row["end_time"])
            except (ValueError, TypeError, AttributeError):
                report.dropped["malformed timestamp"] += 1
                continue
            try:
                s_loc = (float(row["start_lng"]), float(row["start_lat"]))
                e_loc = (float(row["end_lng"]), float(row["end_lat"]))
            except (ValueError, TypeError):
                report.dropped["malformed coordinate"] += 1
                continue
            if end < start:
                report.dropped["negative duration"] += 1
                continue
            if region_of(s_loc, grid) == OUT_OF_AREA or region_of(e_loc, grid) == OUT_OF_AREA:
                report.dropped["out of area"] += 1
                continue
            trips.append(
                TripRecord(
                    order_id=row["order_id"],
                    bike_id=row["bike_id"],
                    user_id=row["user_id"],
                    start_time=start,
                    end_time=end,
                    start_loc=s_loc,
                    end_loc=e_loc,
                )
            )
    report.kept = len(trips)
    if report.n_dropped:
        logger.info("%s: dropped %d of %d rows %s", path, report.n_dropped, report.rows, dict(report.dropped))
    return trips, report


class TripDurations:
    """Observed trip durations (minutes) per origin-destination pair.

    Pairs without observations fall back to ``MINUTES_PER_CELL`` per cell of
    Manhattan distance. Every sampled duration is at least one minute.
    """

    def __init__(self, grid: RegionGrid, samples: dict[tuple[int, int], list[int]] | None = None):
        self.grid = grid
        self.samples = {k: np.asarray(v, dtype=np.int64) for k, v in (samples or {}).items() if len(v)}

    def histogram(self, i: int, l: int) -> Counter:
        return Counter(self.samples.get((i, l), np.empty(0, dtype=np.int64)).tolist())

    def fallback(self, i: int, l: int) -> int:
        return max(1, MINUTES_PER_CELL * self.grid.manhattan(i, l))

    def sample(self, i: int, l: int, rng: np.random.Generator) -> int:
        obs = self.samples.get((i, l))
        if obs is None:
            return self.fallback(i, l)
        return max(1, int(obs[rng.integers(len(obs))]))

    def mean(self, i: int, l: int) -> float:
        obs = self.samples.get((i, l))
        return float(self.fallback(i, l)) if obs is None else float(max(1.0, obs.mean()))


def aggregate_weekday_demand(
    trips: Iterable[TripRecord], grid: RegionGrid, T: int = 24
) -> tuple[DemandTensor, TripDurations]:
    """Sum weekday trips into a one-day ``T x n x n`` demand tensor."""
    if (24 * 60) % T:
        raise ValueError(f"T={T} does not divide a day into whole minutes")
    trips = list(trips)
    if not trips:
        raise ValueError("no trips to aggregate")
    slot_minutes = 24 * 60 // T
    d = np.zeros((T, grid.n, grid.n), dtype=np.int64)
    durations: dict[tuple[int, int], list[int]] = defaultdict(list)
    for trip in trips:
        # numpy weekday: 1970-01-01 was a Thursday
        day = trip.start_time.astype("datetime64[D]")
        weekday = (day.astype(np.int64) + 3) % 7
        if weekday >= 5:
            continue
        i = region_of(trip.start_loc, grid)
        l = region_of(trip.end_loc, grid)
        if i == OUT_OF_AREA or l == OUT_OF_AREA:
            continue
        minute = int((trip.start_time - day) / np.timedelta64(1, "m"))
        d[minute // slot_minutes, i, l] += 1
        durations[(i, l)].append(trip.duration_min)
    return DemandTensor(d), TripDurations(grid, durations)


def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(np.int64)


def correct_lost_demand(demand: DemandTensor, supply_outage: np.ndarray, cap: float = 3.0) -> DemandTensor:
    """Inflate observed counts for minutes where the origin had no bikes.

    ``supply_outage[t, i]`` is the fraction of slot ``t`` during which region
    ``i`` had zero supply; observed counts are scaled by ``1 / (1 - outage)``
    and capped at ``cap`` times the observed count.
    """
    d = demand.counts.astype(np.float64)
    outage = np.asarray(supply_outage, dtype=np.float64)
    if outage.shape != d.shape[:2]:
        raise ValueError(f"outage shape {outage.shape} != {d.shape[:2]}")
    if np.any((outage < 0) | (outage > 1)):
        raise ValueError("outage fractions must lie in [0, 1]")
    keep = 1.0 - outage[:, :, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        inflated = np.where(keep > 0, d / np.where(keep > 0, keep, 1.0), np.inf)
    corrected = np.minimum(inflated, cap * d)
    return DemandTensor(np.maximum(_round_half_up(corrected), demand.counts))


def largest_remainder(total: int, weights: Sequence[int] | np.ndarray) -> np.ndarray:
    """Integer apportionment of ``total`` proportional to integer ``weights``.

    Residue goes to the largest remainders; ties favor the smaller index.
    """
    w = np.asarray(weights, dtype=np.int64)
    s = int(w.sum())
    if s <= 0:
        raise ValueError("weights must have a positive sum")
    base = total * w // s
    rem = total * w % s
    residue = total - int(base.sum())
    order = sorted(range(len(w)), key=lambda k: (-int(rem[k]), k))
    for k in order[:residue]:
        base[k] += 1
    return base


def _float_apportion(total: int, weights: np.ndarray) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64).ravel()
    quota = total * w / w.sum()
    base = np.floor(quota).astype(np.int64)
    residue = total - int(base.sum())
    order = np.lexsort((np.arange(len(w)), -(quota - base)))
    base[order[:residue]] += 1
    return base.reshape(np.shape(weights))


@dataclass(frozen=True)
class SyntheticDemandParams:
    n: int
    T: int = 24
    daily_volume: int = 3000
    peak_slots: tuple[int, int] = (8, 18)
    commute_fraction: float = 0.6
    seed: int = 0
    peak_sigma: float = 1.5
    floor_share: float = 0.15
    residential: tuple[int, ...] | None = None
    work: tuple[int, ...] | None = None


def commute_zones(n: int, seed: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Disjoint residential and work region sets, a third of the area each."""
    if n == 1:
        return (0,), (0,)
    k = max(1, n // 3)
    perm = np.random.default_rng(seed).permutation(n)
    return tuple(sorted(int(v) for v in perm[:k])), tuple(sorted(int(v) for v in perm[k : 2 * k]))


def synthesize_demand(params: SyntheticDemandParams, grid: RegionGrid | None = None) -> DemandTensor:
    """Bimodal commuter demand for one day.

    Slot volumes follow two discretized Gaussians at the peak slots plus a
    uniform floor. Outside the commute share, origin-destination pairs follow
    a gravity model with seeded region popularities (and distance decay when
    a grid is supplied); the commute share flows residential -> work around
    the morning peak and back around the evening peak.
    """
    p = params
    if p.n < 1 or p.T < 1 or p.daily_volume <= 0:
        raise ValueError("n, T and daily_volume must be positive")
    if len(p.peak_slots) != 2 or not all(0 <= s < p.T for s in p.peak_slots):
        raise ValueError(f"need two peak slots inside 0..{p.T - 1}")
    if not 0.0 <= p.commute_fraction <= 1.0:
        raise ValueError("commute_fraction must lie in [0, 1]")
    if grid is not None and grid.n != p.n:
        raise ValueError("grid size does not match n")

    rng = np.random.default_rng(p.seed)
    t = np.arange(p.T, dtype=np.float64)
    morning = np.exp(-0.5 * ((t - p.peak_slots[0]) / p.peak_sigma) ** 2)
    evening = np.exp(-0.5 * ((t - p.peak_slots[1]) / p.peak_sigma) ** 2)
    morning /= morning.sum()
    evening /= evening.sum()
    floor = np.full(p.T, 1.0 / p.T)
    peak_share = 1.0 - p.floor_share
    slot_w = 0.5 * peak_share * (morning + evening) + p.floor_share * floor
    slot_volume = _float_apportion(p.daily_volume, slot_w)

    pop = rng.gamma(2.0, 1.0, size=p.n)
    gravity = np.outer(pop, pop)
    if grid is not None:
        dist = np.array([[grid.manhattan(i, l) for l in range(p.n)] for i in range(p.n)])
        gravity = gravity / (1.0 + dist)
    gravity /= gravity.sum()

    res, work = (p.residential, p.work) if p.residential is not None else commute_zones(p.n, p.seed)
    to_work = np.zeros((p.n, p.n))
    to_work[np.ix_(res, work)] = 1.0
    to_work /= to_work.sum()

    d = np.zeros((p.T, p.n, p.n), dtype=np.int64)
    for s in range(p.T):
        m_part = 0.5 * peak_share * morning[s] / slot_w[s]
        e_part = 0.5 * peak_share * evening[s] / slot_w[s]
        od = (
            p.commute_fraction * (m_part * to_work + e_part * to_work.T)
            + (1.0 - p.commute_fraction * (m_part + e_part)) * gravity
        )
        d[s] = _float_apportion(int(slot_volume[s]), od)
    return DemandTensor(d)


def uniform_location_pool(grid: RegionGrid, per_region: int, seed: int) -> list[list[tuple[float, float]]]:
    """Synthetic bike location pool: points uniform in each cell, as (lon, lat)."""
    rng = np.random.default_rng(seed)
    pool = []
    for i in range(grid.n):
        x0, y0, x1, y1 = grid.cell_bounds(i)
        xs = rng.uniform(x0, x1, per_region)
        ys = rng.uniform(y0, y1, per_region)
        pool.append([grid.to_lonlat(x, y) for x, y in zip(xs, ys)])
    return pool


def bike_location_pool(trips: Iterable[TripRecord], grid: RegionGrid) -> list[list[tuple[float, float]]]:
    """Observed bike positions per region: trip start and end points."""
    pool: list[list[tuple[float, float]]] = [[] for _ in range(grid.n)]
    for trip in trips:
        for loc in (trip.start_loc, trip.end_loc):
            i = region_of(loc, grid)
            if i != OUT_OF_AREA:
                pool[i].append(loc)
    return pool


def initial_bike_distribution(
    total_supply: int,
    demand: DemandTensor,
    bike_location_pool: Sequence[Sequence[tuple[float, float]]],
    seed: int,
) -> list[list[tuple[float, float]]]:
    """Place the fleet proportionally to each region's share of daily demand."""
    if total_supply < 0:
        raise ValueError("total_supply must be nonnegative")
    totals = demand.origin_totals()
    if totals.sum() == 0:
        raise ValueError("demand tensor is all zero")
    counts = largest_remainder(total_supply, totals)
    rng = np.random.default_rng(seed)
    placements = []
    for i, k in enumerate(counts):
        pool = bike_location_pool[i]
        if k and not len(pool):
            raise ValueError(f"region {i} receives {k} bikes but its location pool is empty")
        idx = rng.integers(len(pool), size=int(k)) if k else []
        placements.append([tuple(pool[j]) for j in idx])
    return placements


def default_total_supply(order_count: int) -> int:
    """Fleet size scaled from order volume by the national bikes-per-order ratio 3.65/20."""
    if order_count < 0:
        raise ValueError("order_count must be nonnegative")
    # round-half-up of order_count * 365 / 2000 in integer arithmetic
    return (order_count * 730 + 2000) // 4000
