"""Minute-resolution bike-sharing environment with pick-up incentives.

Each call to :meth:`BikeShareEnv.step` covers one timeslot. Within the slot,
requests are served minute by minute in a seeded random order; a user with no
bike in his own region may accept a priced offer for the nearest bike in a
neighboring region when the incentive covers his walking cost.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Sequence

import numpy as np

from .core import (
    DEFAULT_MAX_PRICE,
    DEFAULT_WINDOW,
    DemandTensor,
    EpisodeLog,
    ObservationLayout,
    RegionGrid,
    SystemState,
    calibrated_alpha,
    clip_action,
    neighbor_table,
)
from .ingest import TripDurations, initial_bike_distribution, uniform_location_pool


class EpisodeDone(RuntimeError):
    pass


@dataclass
class SimConfig:
    """Scenario for one environment."""

    grid: RegionGrid
    demand: DemandTensor
    total_supply: int
    budget: float
    seed: int = 0
    days: int = 1
    window: int = DEFAULT_WINDOW
    max_price: float = DEFAULT_MAX_PRICE
    minutes_per_slot: int = 60
    alpha: float | None = None
    durations: TripDurations | None = None
    location_pool: Sequence[Sequence[tuple[float, float]]] | None = None
    record_costs: bool = False
    audit: bool = False

    def __post_init__(self):
        if self.demand.n != self.grid.n:
            raise ValueError(f"demand has {self.demand.n} regions, grid has {self.grid.n}")
        if self.total_supply < 0:
            raise ValueError("total_supply must be nonnegative")
        if self.budget < 0:
            raise ValueError("budget must be nonnegative")
        if self.days < 1 or self.window < 1 or self.minutes_per_slot < 1:
            raise ValueError("days, window and minutes_per_slot must be positive")
        if self.max_price <= 0:
            raise ValueError("max_price must be positive")

    @property
    def horizon(self) -> int:
        return self.demand.T * self.days

    @property
    def cost_alpha(self) -> float:
        return self.alpha if self.alpha is not None else calibrated_alpha(self.grid, self.max_price)


@dataclass
class Offer:
    target_region: int
    bike: int
    position: tuple[float, float]
    price: float
    distance: float

    def utility(self, alpha: float) -> float:
        return self.price - alpha * self.distance**2


@dataclass
class StepOutcome:
    reward: int
    served: np.ndarray
    expenses: np.ndarray
    unsatisfied: np.ndarray
    arrivals: np.ndarray
    requests: np.ndarray
    outage: np.ndarray
    next_observation: np.ndarray
    episode_done: bool
    remaining_budget: float
    incentivized: np.ndarray | None = None
    minute_fleet: list[int] = field(default_factory=list)
    minute_budget: list[float] = field(default_factory=list)


class _BikePool:
    """Positions of the bikes parked in one region; swap-remove storage."""

    def __init__(self, xy: Sequence[tuple[float, float]] = ()):
        cap = max(16, 2 * len(xy))
        self.x = np.empty(cap)
        self.y = np.empty(cap)
        self.size = 0
        for px, py in xy:
            self.add(px, py)

    def add(self, x: float, y: float) -> None:
        if self.size == len(self.x):
            self.x = np.concatenate([self.x, np.empty(len(self.x))])
            self.y = np.concatenate([self.y, np.empty(len(self.y))])
        self.x[self.size] = x
        self.y[self.size] = y
        self.size += 1

    def nearest(self, x: float, y: float) -> tuple[int, float]:
        dx = self.x[: self.size] - x
        dy = self.y[: self.size] - y
        d2 = dx * dx + dy * dy
        k = int(np.argmin(d2))
        return k, math.sqrt(d2[k])

    def take(self, k: int) -> tuple[float, float]:
        pos = (float(self.x[k]), float(self.y[k]))
        last = self.size - 1
        self.x[k] = self.x[last]
        self.y[k] = self.y[last]
        self.size = last
        return pos

    def positions(self) -> list[tuple[float, float]]:
        return list(zip(self.x[: self.size].tolist(), self.y[: self.size].tolist()))


class BikeShareEnv:
    """Timeslot-level environment; one instance per thread."""

    def __init__(self, config: SimConfig):
        self.config = config
        self.grid = config.grid
        self.n = config.grid.n
        self.layout = ObservationLayout(self.n, config.window)
        self.alpha = config.cost_alpha
        self.nbrs = neighbor_table(self.grid)
        self.durations = config.durations or TripDurations(self.grid)
        self.state: SystemState | None = None
        self.log = EpisodeLog()
        self.cost_samples: list[tuple[int, int, int, float]] = []
        self.min_cost_samples: list[tuple[int, int, float]] = []
        self._slot = 0
        self._done = True

    # -- lifecycle -----------------------------------------------------
    @property
    def T(self) -> int:
        return self.config.demand.T

    @property
    def horizon(self) -> int:
        return self.config.horizon

    @property
    def done(self) -> bool:
        return self._done

    @property
    def slot(self) -> int:
        return self._slot

    def reset(self, seed: int | None = None) -> np.ndarray:
        """Place the fleet, refill the budget and return the first observation."""
        cfg = self.config
        seed = cfg.seed if seed is None else seed
        self.rng = np.random.default_rng(seed)
        if cfg.total_supply and cfg.demand.total() == 0:
            raise ValueError("cannot place bikes against an all-zero demand tensor")
        pool = cfg.location_pool
        if pool is None:
            pool = uniform_location_pool(self.grid, max(64, cfg.total_supply), seed)
        if cfg.total_supply:
            placements = initial_bike_distribution(cfg.total_supply, cfg.demand, pool, seed)
        else:
            placements = [[] for _ in range(self.n)]
        self.pools = [_BikePool([self.grid.to_local(*loc) for loc in p]) for p in placements]
        self._transit: list[tuple[int, int, int, float, float]] = []
        self._seq = 0
        self.state = SystemState(
            bike_xy=[],
            in_transit=[],
            remaining_budget=float(cfg.budget),
            unservice_window=np.zeros((self.n, cfg.window)),
            last_demand=np.zeros(self.n),
            last_arrival=np.zeros(self.n),
            last_expense=np.zeros(self.n),
            fleet_size=int(cfg.total_supply),
        )
        self._slot = 0
        self._done = False
        self.cost_samples = []
        self.min_cost_samples = []
        self.log = EpisodeLog(census_begin=self.supply().copy())
        return self.observation()

    # -- observation ---------------------------------------------------
    def supply(self) -> np.ndarray:
        return np.array([p.size for p in self.pools], dtype=np.int64)

    @property
    def remaining_budget(self) -> float:
        return self.state.remaining_budget

    def observation(self) -> np.ndarray:
        st = self.state
        return self.layout.build(
            self.supply(),
            st.last_demand,
            st.last_arrival,
            st.last_expense,
            st.unservice_window,
            st.remaining_budget,
        )

    def bike_census(self) -> dict:
        """Per-region parked bikes and the number of bikes currently riding."""
        supply = self.supply()
        return {"supply": supply, "in_transit": len(self._transit), "total": int(supply.sum()) + len(self._transit)}

    def sync_state(self) -> SystemState:
        """Refresh the position/transit view of :attr:`state` and return it."""
        self.state.bike_xy = [p.positions() for p in self.pools]
        self.state.in_transit = [(a, d, x, y) for a, _, d, x, y in sorted(self._transit)]
        return self.state

    # -- dynamics ------------------------------------------------------
    def _slot_requests(self, t_day: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        d = self.config.demand.counts[t_day]
        origins, dests = np.nonzero(d)
        reps = d[origins, dests]
        o = np.repeat(origins, reps)
        l = np.repeat(dests, reps)
        k = len(o)
        minutes = self.rng.integers(0, self.config.minutes_per_slot, size=k)
        u = self.rng.random((k, 2))
        cw, ch = self.grid.cell_width_m, self.grid.cell_height_m
        rows, cols = np.divmod(o, self.grid.cols)
        ux = (cols + u[:, 0]) * cw
        uy = (rows + u[:, 1]) * ch
        order = np.lexsort((self.rng.permutation(k), minutes))
        return minutes[order], o[order], l[order], ux[order], uy[order]

    def _depart(self, j: int, l: int, minute: int) -> None:
        dur = self.durations.sample(j, l, self.rng)
        x0, y0, x1, y1 = self.grid.cell_bounds(l)
        ex = x0 + self.rng.random() * (x1 - x0)
        ey = y0 + self.rng.random() * (y1 - y0)
        heapq.heappush(self._transit, (minute + dur, self._seq, l, ex, ey))
        self._seq += 1

    def best_offer(self, i: int, ux: float, uy: float, price: float) -> Offer | None:
        """Highest-utility offer for a user at ``(ux, uy)`` in region ``i``.

        Ties go to the shorter walk, then the smaller region index.
        """
        best = None
        for j in self.nbrs[i]:
            pool = self.pools[j]
            if not pool.size:
                continue
            k, dist = pool.nearest(ux, uy)
            offer = Offer(j, k, (float(pool.x[k]), float(pool.y[k])), price, dist)
            if best is None or (offer.utility(self.alpha), -dist, -j) > (best.utility(self.alpha), -best.distance, -best.target_region):
                best = offer
        return best

    def step(self, action) -> StepOutcome:
        if self._done:
            raise EpisodeDone("step() called after the episode finished; call reset()")
        cfg = self.config
        n = self.n
        price = clip_action(np.asarray(action, dtype=np.float64).reshape(n), cfg.max_price)
        st = self.state
        t_day = self._slot % self.T
        mps = cfg.minutes_per_slot
        base = self._slot * mps

        served = np.zeros(n, dtype=np.int64)
        unsat = np.zeros(n, dtype=np.int64)
        reqs = np.zeros(n, dtype=np.int64)
        arrivals = np.zeros(n, dtype=np.int64)
        expense = np.zeros(n)
        paid = np.zeros(n, dtype=np.int64)
        empty_minutes = np.zeros(n, dtype=np.int64)
        minute_fleet: list[int] = []
        minute_budget: list[float] = []

        minutes, origins, dests, uxs, uys = self._slot_requests(t_day)
        ptr = 0
        total_req = len(minutes)
        for m in range(mps):
            now = base + m
            while self._transit and self._transit[0][0] <= now:
                _, _, dest, ex, ey = heapq.heappop(self._transit)
                self.pools[dest].add(ex, ey)
                arrivals[dest] += 1
            for j in range(n):
                if not self.pools[j].size:
                    empty_minutes[j] += 1
            while ptr < total_req and minutes[ptr] == m:
                i = int(origins[ptr])
                l = int(dests[ptr])
                ux = float(uxs[ptr])
                uy = float(uys[ptr])
                ptr += 1
                reqs[i] += 1
                pool = self.pools[i]
                if pool.size:
                    k, _ = pool.nearest(ux, uy)
                    pool.take(k)
                    served[i] += 1
                    self._depart(i, l, now)
                    continue
                if cfg.record_costs:
                    self._record_costs(t_day, i, ux, uy)
                p = float(price[i])
                if p <= 0.0 or st.remaining_budget < p:
                    unsat[i] += 1
                    continue
                offer = self.best_offer(i, ux, uy, p)
                if offer is None or offer.utility(self.alpha) < 0.0:
                    unsat[i] += 1
                    continue
                self.pools[offer.target_region].take(offer.bike)
                st.remaining_budget -= p
                expense[i] += p
                paid[i] += 1
                served[i] += 1
                self._depart(offer.target_region, l, now)
            if cfg.audit:
                minute_fleet.append(int(sum(p.size for p in self.pools)) + len(self._transit))
                minute_budget.append(st.remaining_budget)

        self._slot += 1
        self._done = self._slot >= self.horizon
        rate = np.divide(unsat, reqs, out=np.zeros(n), where=reqs > 0)
        st.unservice_window = np.column_stack([rate, st.unservice_window[:, :-1]])
        st.last_demand = reqs.astype(np.float64)
        st.last_arrival = arrivals.astype(np.float64)
        st.last_expense = expense
        if self._done:
            self._drain()
        obs = self.observation()
        outcome = StepOutcome(
            reward=int(served.sum()),
            served=served,
            expenses=expense,
            unsatisfied=unsat,
            arrivals=arrivals,
            requests=reqs,
            outage=empty_minutes / mps,
            next_observation=obs,
            episode_done=self._done,
            remaining_budget=st.remaining_budget,
            incentivized=paid,
            minute_fleet=minute_fleet,
            minute_budget=minute_budget,
        )
        census = self.bike_census()
        self.log.slots.append(
            {
                "slot": self._slot - 1,
                "reward": outcome.reward,
                "requests": reqs.tolist(),
                "served": served.tolist(),
                "incentivized": paid.tolist(),
                "unsatisfied": unsat.tolist(),
                "expenses": expense.tolist(),
                "arrivals": arrivals.tolist(),
                "outage": outcome.outage.tolist(),
                "remaining_budget": st.remaining_budget,
                "supply": census["supply"].tolist(),
                "in_transit": census["in_transit"],
            }
        )
        if self._done:
            self.log.census_end = census["supply"].copy()
        return outcome

    def _drain(self) -> None:
        while self._transit:
            _, _, dest, ex, ey = heapq.heappop(self._transit)
            self.pools[dest].add(ex, ey)

    def _record_costs(self, t_day: int, i: int, ux: float, uy: float) -> None:
        best = math.inf
        for j in self.nbrs[i]:
            pool = self.pools[j]
            if pool.size:
                _, dist = pool.nearest(ux, uy)
                c = self.alpha * dist * dist
                self.cost_samples.append((t_day, i, j, c))
                best = min(best, c)
        if best < math.inf:
            self.min_cost_samples.append((t_day, i, best))


def write_episode_jsonl(log: EpisodeLog, fh: IO[str] | str | Path) -> None:
    """One JSON object per slot."""
    if isinstance(fh, (str, Path)):
        with open(fh, "w", encoding="utf-8") as f:
            write_episode_jsonl(log, f)
        return
    for rec in log.slots:
        fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_episode_jsonl(path: str | Path) -> EpisodeLog:
    with open(path, encoding="utf-8") as f:
        slots = [json.loads(line) for line in f if line.strip()]
    log = EpisodeLog(slots=slots)
    if slots:
        last = slots[-1]
        log.census_end = np.asarray(last["supply"]) if last["in_transit"] == 0 else None
    return log
