"""Domain types and grid geometry shared across the package.

Positions are handled in two coordinate systems: (longitude, latitude) at the
edges (trip files, bike location pools) and local planar meters measured from
the grid's south-west corner everywhere else. The local frame is an
equirectangular projection around the grid origin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

EARTH_RADIUS_M = 6_371_000.0
OUT_OF_AREA = -1

# Features stored per region ahead of the un-service window: S, D, A, E.
BASE_REGION_FEATURES = 4
DEFAULT_WINDOW = 8
DEFAULT_MAX_PRICE = 5.0


@dataclass(frozen=True)
class RegionGrid:
    """Rectangular partition of the service area into ``rows * cols`` cells.

    Cells are numbered row-major starting at the south-west corner, so
    row 0 is the southernmost row and column 0 the westernmost column.
    """

    rows: int
    cols: int
    cell_width_m: float = 500.0
    cell_height_m: float = 500.0
    origin: tuple[float, float] = (121.4737, 31.2304)

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"grid needs at least one cell, got {self.rows}x{self.cols}")
        if not (self.cell_width_m > 0 and self.cell_height_m > 0):
            raise ValueError("cell dimensions must be positive")

    @property
    def n(self) -> int:
        return self.rows * self.cols

    @property
    def width_m(self) -> float:
        return self.cols * self.cell_width_m

    @property
    def height_m(self) -> float:
        return self.rows * self.cell_height_m

    @property
    def cell_diagonal_m(self) -> float:
        return math.hypot(self.cell_width_m, self.cell_height_m)

    @property
    def max_walk_m(self) -> float:
        # user at one corner of his cell, bike at the far corner of a diagonal neighbor
        return 2.0 * self.cell_diagonal_m

    def row_col(self, i: int) -> tuple[int, int]:
        self._check_index(i)
        return divmod(i, self.cols)

    def index(self, row: int, col: int) -> int:
        return row * self.cols + col

    def cell_bounds(self, i: int) -> tuple[float, float, float, float]:
        """Local-meter bounds ``(x0, y0, x1, y1)`` of cell ``i``."""
        r, c = self.row_col(i)
        x0 = c * self.cell_width_m
        y0 = r * self.cell_height_m
        return x0, y0, x0 + self.cell_width_m, y0 + self.cell_height_m

    def cell_center(self, i: int) -> tuple[float, float]:
        x0, y0, x1, y1 = self.cell_bounds(i)
        return 0.5 * (x0 + x1), 0.5 * (y0 + y1)

    def to_local(self, lon: float, lat: float) -> tuple[float, float]:
        lon0, lat0 = self.origin
        k = math.pi / 180.0 * EARTH_RADIUS_M
        return (lon - lon0) * k * math.cos(math.radians(lat0)), (lat - lat0) * k

    def to_lonlat(self, x: float, y: float) -> tuple[float, float]:
        lon0, lat0 = self.origin
        k = math.pi / 180.0 * EARTH_RADIUS_M
        return lon0 + x / (k * math.cos(math.radians(lat0))), lat0 + y / k

    def region_of_local(self, x: float, y: float) -> int:
        if not (0.0 <= x < self.width_m and 0.0 <= y < self.height_m):
            return OUT_OF_AREA
        c = min(int(x // self.cell_width_m), self.cols - 1)
        r = min(int(y // self.cell_height_m), self.rows - 1)
        return self.index(r, c)

    def manhattan(self, i: int, j: int) -> int:
        ri, ci = self.row_col(i)
        rj, cj = self.row_col(j)
        return abs(ri - rj) + abs(ci - cj)

    def _check_index(self, i: int) -> None:
        if not 0 <= i < self.n:
            raise IndexError(f"region {i} outside 0..{self.n - 1}")


def region_of(loc: tuple[float, float], grid: RegionGrid) -> int:
    """Row-major index of the cell containing ``loc`` = (lon, lat), or ``OUT_OF_AREA``."""
    x, y = grid.to_local(*loc)
    return grid.region_of_local(x, y)


def neighbors(i: int, grid: RegionGrid) -> list[int]:
    """Moore neighborhood of ``i`` clipped to the grid, in ascending index order."""
    r, c = grid.row_col(i)
    out = []
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            rr, cc = r + dr, c + dc
            if 0 <= rr < grid.rows and 0 <= cc < grid.cols:
                out.append(grid.index(rr, cc))
    return sorted(out)


def neighbor_table(grid: RegionGrid) -> list[list[int]]:
    return [neighbors(i, grid) for i in range(grid.n)]


def walking_cost(x: float | np.ndarray, alpha: float) -> float | np.ndarray:
    """Quadratic walking cost ``alpha * x**2`` for a walk of ``x`` meters."""
    return alpha * np.square(x)


def calibrated_alpha(grid: RegionGrid, max_cost: float = DEFAULT_MAX_PRICE) -> float:
    """Cost coefficient making the longest feasible walk cost exactly ``max_cost``."""
    return max_cost / grid.max_walk_m**2


@dataclass(frozen=True)
class TripRecord:
    order_id: str
    bike_id: str
    user_id: str
    start_time: np.datetime64
    end_time: np.datetime64
    start_loc: tuple[float, float]
    end_loc: tuple[float, float]

    def __post_init__(self):
        if self.end_time < self.start_time:
            raise ValueError(f"trip {self.order_id} ends before it starts")

    @property
    def duration_min(self) -> int:
        return int((self.end_time - self.start_time) / np.timedelta64(1, "m"))


@dataclass(frozen=True)
class DemandTensor:
    """Counts ``d[t, i, l]`` of users intending to ride from ``i`` to ``l`` in slot ``t``."""

    counts: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.counts)
        if d.ndim != 3 or d.shape[1] != d.shape[2]:
            raise ValueError(f"demand must be T x n x n, got shape {d.shape}")
        if np.any(d < 0):
            raise ValueError("demand counts must be nonnegative")
        d = d.astype(np.int64)
        d.setflags(write=False)
        object.__setattr__(self, "counts", d)

    @property
    def T(self) -> int:
        return self.counts.shape[0]

    @property
    def n(self) -> int:
        return self.counts.shape[1]

    def origin_totals(self) -> np.ndarray:
        """``D_i`` summed over slots and destinations."""
        return self.counts.sum(axis=(0, 2))

    def per_slot_origin(self) -> np.ndarray:
        """``D_i(t)`` as a ``T x n`` array."""
        return self.counts.sum(axis=2)

    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class SystemState:
    """Mutable ground truth evolved by one simulator instance."""

    bike_xy: list[list[tuple[float, float]]]
    in_transit: list[tuple[int, int, float, float]]  # (arrival minute, dest region, x, y)
    remaining_budget: float
    unservice_window: np.ndarray  # n x W, column 0 is the most recent slot
    last_demand: np.ndarray
    last_arrival: np.ndarray
    last_expense: np.ndarray
    fleet_size: int

    def supply(self) -> np.ndarray:
        return np.array([len(b) for b in self.bike_xy], dtype=np.int64)

    def check_conservation(self) -> None:
        total = int(self.supply().sum()) + len(self.in_transit)
        if total != self.fleet_size:
            raise AssertionError(f"fleet size drifted: {total} != {self.fleet_size}")


@dataclass(frozen=True)
class ObservationLayout:
    """Index arithmetic for the flat observation vector.

    Each region owns a contiguous block ``[S, D, A, E, U_1..U_W]`` (U_1 the
    most recent slot); the remaining budget is the final entry.
    """

    n: int
    window: int = DEFAULT_WINDOW

    @property
    def region_width(self) -> int:
        return BASE_REGION_FEATURES + self.window

    @property
    def size(self) -> int:
        return self.n * self.region_width + 1

    @property
    def budget_index(self) -> int:
        return self.size - 1

    def region_slice(self, j: int) -> slice:
        w = self.region_width
        return slice(j * w, (j + 1) * w)

    def regions(self, obs: np.ndarray) -> np.ndarray:
        """View ``(..., n, region_width)`` of the per-region blocks."""
        obs = np.asarray(obs)
        return obs[..., : self.n * self.region_width].reshape(
            obs.shape[:-1] + (self.n, self.region_width)
        )

    def budget(self, obs: np.ndarray) -> np.ndarray:
        return np.asarray(obs)[..., self.budget_index]

    def build(
        self,
        supply: Sequence[float],
        demand: Sequence[float],
        arrival: Sequence[float],
        expense: Sequence[float],
        unservice: np.ndarray,
        remaining_budget: float,
    ) -> np.ndarray:
        blocks = np.column_stack(
            [supply, demand, arrival, expense, np.asarray(unservice).reshape(self.n, self.window)]
        ).astype(np.float64)
        return np.concatenate([blocks.ravel(), [float(remaining_budget)]])


def clip_action(action: np.ndarray, max_price: float = DEFAULT_MAX_PRICE) -> np.ndarray:
    a = np.nan_to_num(np.asarray(action, dtype=np.float64), nan=0.0)
    return np.clip(a, 0.0, max_price)


@dataclass
class EpisodeLog:
    """Per-slot records of one episode plus the begin/end bike censuses."""

    slots: list[dict] = field(default_factory=list)
    census_begin: np.ndarray | None = None
    census_end: np.ndarray | None = None

    def __iter__(self) -> Iterator[dict]:
        return iter(self.slots)

    def __len__(self) -> int:
        return len(self.slots)

    @property
    def unsatisfied(self) -> int:
        return int(sum(sum(s["unsatisfied"]) for s in self.slots))

    @property
    def served(self) -> int:
        return int(sum(s["reward"] for s in self.slots))

    @property
    def requests(self) -> int:
        return int(sum(sum(s["requests"]) for s in self.slots))

    @property
    def spent(self) -> float:
        return float(sum(sum(s["expenses"]) for s in self.slots))
