"""Offline-optimal incentive plan: an integer program over known demand and costs.

The program chooses how many users travelling from region ``i`` to ``l`` in
slot ``t`` pick up a bike in region ``j`` (``j`` is ``i`` or one of its
neighbors), maximizing the number of served users subject to demand,
slot-start supply, a total budget and supply dynamics in which every trip
ends within its own slot.

It is solved exactly at desk scale with a bounded-variable dense simplex
inside best-bound branch-and-bound. Internally the per-destination pick-up
counts ``x[t,i,j,l]`` are aggregated into pick-ups ``y[t,i,j]`` and served
users ``z[t,i,l]``; any integral ``(y, z)`` with matching totals splits back
into an integral ``x`` (a transportation problem), so nothing is lost.
"""

from __future__ import annotations

import heapq
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.linalg.blas import dger

from .core import RegionGrid, neighbors

INT_TOL = 1e-6
NODE_CAP = 100_000


# ---------------------------------------------------------------------------
# instances
# ---------------------------------------------------------------------------

@dataclass
class IlpInstance:
    """Demand ``(T, n, n)``, initial supply ``(n,)``, costs ``(T, n, n)`` and a budget.

    ``allowed[i, j]`` marks where users of region ``i`` may pick up bikes;
    the diagonal is always allowed and always free.
    """

    demand: np.ndarray
    supply: np.ndarray
    costs: np.ndarray
    allowed: np.ndarray
    budget: float

    def __post_init__(self):
        self.demand = np.asarray(self.demand, dtype=np.int64)
        self.supply = np.asarray(self.supply, dtype=np.int64)
        self.costs = np.asarray(self.costs, dtype=np.float64)
        self.allowed = np.asarray(self.allowed, dtype=bool)
        T, n, n2 = self.demand.shape
        if n != n2 or self.supply.shape != (n,) or self.costs.shape != (T, n, n) or self.allowed.shape != (n, n):
            raise ValueError("inconsistent instance shapes")
        if (self.demand < 0).any() or (self.supply < 0).any():
            raise ValueError("demand and supply must be nonnegative")
        if not np.diag(self.allowed).all():
            raise ValueError("every region must allow local pick-ups")
        used = np.broadcast_to(self.allowed, self.costs.shape)
        c = self.costs[used]
        if not np.all(np.isfinite(c)) or (c < 0).any():
            raise ValueError("costs must be finite and nonnegative on allowed pairs")
        if np.any(np.diagonal(self.costs, axis1=1, axis2=2) != 0):
            raise ValueError("local pick-ups must cost nothing")
        if not math.isfinite(self.budget) or self.budget < 0:
            raise ValueError("budget must be finite and nonnegative")

    @property
    def T(self) -> int:
        return self.demand.shape[0]

    @property
    def n(self) -> int:
        return self.demand.shape[1]

    def variables(self) -> list[tuple[int, int, int, int]]:
        """Index list of the ``x[t, i, j, l]`` variables that can be nonzero."""
        out = []
        for t, i, l in zip(*np.nonzero(self.demand)):
            for j in np.flatnonzero(self.allowed[i]):
                out.append((int(t), int(i), int(j), int(l)))
        return sorted(out)

    def window(self, start: int, stop: int, supply: np.ndarray, budget: float) -> "IlpInstance":
        return IlpInstance(self.demand[start:stop], supply, self.costs[start:stop], self.allowed, budget)

    def to_dict(self) -> dict:
        costs = np.where(np.broadcast_to(self.allowed, self.costs.shape), self.costs, 0.0)
        return {
            "demand": self.demand.tolist(),
            "supply": self.supply.tolist(),
            "costs": costs.tolist(),
            "allowed": self.allowed.astype(int).tolist(),
            "budget": self.budget,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "IlpInstance":
        return cls(np.array(d["demand"]), np.array(d["supply"]), np.array(d["costs"]), np.array(d["allowed"]), float(d["budget"]))

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "IlpInstance":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def neighbor_mask(grid: RegionGrid) -> np.ndarray:
    mask = np.eye(grid.n, dtype=bool)
    for i in range(grid.n):
        mask[i, neighbors(i, grid)] = True
    return mask


def sample_costs(
    samples: Mapping[tuple[int, int, int], Sequence[float]],
    allowed: np.ndarray,
    T: int,
    seed: int | None = None,
) -> np.ndarray:
    """One cost per ``(t, i, j)`` drawn from the empirical samples of that pair and slot.

    ``samples`` is keyed by ``(i, j, t)``. A pair with no samples in slot
    ``t`` falls back to its samples pooled over all slots; a pair with none
    at all is an error. Local pairs cost 0. Non-allowed pairs are ``inf``.
    """
    rng = np.random.default_rng(seed)
    allowed = np.asarray(allowed, dtype=bool)
    n = allowed.shape[0]
    pooled: dict[tuple[int, int], list[float]] = {}
    for (i, j, _), vals in samples.items():
        pooled.setdefault((i, j), []).extend(vals)
    out = np.full((T, n, n), np.inf)
    for i, j in zip(*np.nonzero(allowed)):
        i, j = int(i), int(j)
        for t in range(T):
            if i == j:
                out[t, i, j] = 0.0
                continue
            pool = samples.get((i, j, t)) or pooled.get((i, j))
            if not pool:
                raise ValueError(f"no cost samples for pair ({i}, {j})")
            out[t, i, j] = float(pool[rng.integers(len(pool))])
    return out


# ---------------------------------------------------------------------------
# bounded-variable dense simplex
# ---------------------------------------------------------------------------

@dataclass
class LpResult:
    status: str  # "optimal" | "infeasible" | "unbounded"
    x: np.ndarray | None
    objective: float
    iterations: int


class _Tableau:
    """Dense tableau ``B^-1 [A | I]`` with nonbasic variables at either bound."""

    def __init__(self, A: np.ndarray, b: np.ndarray, upper: np.ndarray, basis: np.ndarray, tol: float):
        self.T = np.asfortranarray(A, dtype=np.float64)
        self.beta = b.astype(np.float64).copy()  # values of the basic variables
        self.upper = upper
        self.basis = basis.copy()
        self.at_upper = np.zeros(A.shape[1], dtype=bool)
        self.is_basic = np.zeros(A.shape[1], dtype=bool)
        self.is_basic[basis] = True
        self.tol = tol

    def values(self) -> np.ndarray:
        x = np.where(self.at_upper, self.upper, 0.0)
        x[self.basis] = self.beta
        return x

    def pivot(self, r: int, j: int, d: np.ndarray) -> None:
        T = self.T
        piv = T[r, j]
        row = T[r, :] / piv
        col = T[:, j].copy()
        col[r] = 0.0
        # rank-one update in place: T -= col * row
        self.T = dger(-1.0, col, row, a=T, overwrite_a=True)
        self.T[r, :] = row
        d -= d[j] * row
        leaving = self.basis[r]
        self.is_basic[leaving] = False
        self.is_basic[j] = True
        self.basis[r] = j

    def run(self, c: np.ndarray, blocked: np.ndarray | None = None, max_iter: int | None = None) -> tuple[str, int]:
        """Maximize ``c @ x`` from the current basic feasible point."""
        m, N = self.T.shape
        tol = self.tol
        d = c - c[self.basis] @ self.T  # reduced costs
        bland_after = 10 * (m + N)
        limit = max_iter if max_iter is not None else 50 * bland_after
        it = 0
        while True:
            eligible = ~self.is_basic & (((d > tol) & ~self.at_upper) | ((d < -tol) & self.at_upper))
            if blocked is not None:
                eligible &= ~blocked
            cand = np.flatnonzero(eligible)
            if not len(cand):
                return "optimal", it
            if it >= limit:
                raise RuntimeError("simplex iteration limit reached")
            bland = it >= bland_after
            j = int(cand[0]) if bland else int(cand[np.argmax(np.abs(d[cand]))])
            delta = -1.0 if self.at_upper[j] else 1.0
            alpha = delta * self.T[:, j]
            # ratio test
            theta = self.upper[j]
            r = -1
            with np.errstate(divide="ignore", invalid="ignore"):
                down = alpha > tol
                up = alpha < -tol
                ratios = np.full(m, np.inf)
                ratios[down] = self.beta[down] / alpha[down]
                ub = self.upper[self.basis]
                ratios[up] = (ub[up] - self.beta[up]) / (-alpha[up])
            ratios = np.maximum(ratios, 0.0)
            if m:
                rmin = ratios.min()
                if rmin < theta:
                    theta = rmin
                    ties = np.flatnonzero(ratios <= rmin + tol)
                    if bland:
                        r = int(ties[np.argmin(self.basis[ties])])
                    else:
                        r = int(ties[np.argmax(np.abs(alpha[ties]))])
            if not math.isfinite(theta):
                return "unbounded", it
            self.beta -= theta * alpha
            it += 1
            if r < 0:
                # entering variable runs to its other bound; no basis change
                self.at_upper[j] = not self.at_upper[j]
                continue
            leaving = self.basis[r]
            self.at_upper[leaving] = alpha[r] < 0  # left at its upper bound when it rose
            self.beta[r] = (self.upper[j] - theta) if self.at_upper[j] else theta
            self.at_upper[j] = False
            self.pivot(r, j, d)
            # clean tiny negatives from round-off
            np.clip(self.beta, 0.0, None, out=self.beta)


def solve_lp(
    c: np.ndarray,
    A: np.ndarray,
    b: np.ndarray,
    lower: np.ndarray | None = None,
    upper: np.ndarray | None = None,
    eq: np.ndarray | None = None,
    tol: float = 1e-9,
) -> LpResult:
    """Maximize ``c @ x`` subject to ``A x <= b`` (rows flagged in ``eq`` as ``=``) and bounds.

    Lower bounds must be finite; upper bounds may be ``inf``. Two-phase
    primal simplex: Dantzig pricing, switching to Bland's rule after
    ``10 (m + n)`` iterations so cycling cannot persist.
    """
    c = np.asarray(c, dtype=np.float64)
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    b = np.asarray(b, dtype=np.float64)
    m, n = A.shape
    if A.size == 0:
        A = np.zeros((m, n))
    lower = np.zeros(n) if lower is None else np.asarray(lower, dtype=np.float64)
    upper = np.full(n, np.inf) if upper is None else np.asarray(upper, dtype=np.float64)
    eq = np.zeros(m, dtype=bool) if eq is None else np.asarray(eq, dtype=bool)
    if not np.all(np.isfinite(lower)):
        raise ValueError("lower bounds must be finite")
    if (upper < lower - tol).any():
        return LpResult("infeasible", None, -math.inf, 0)
    span = np.maximum(upper - lower, 0.0)
    rhs = b - A @ lower
    # columns: structural (n) | slacks for inequality rows | artificials
    ineq = np.flatnonzero(~eq)
    slack = np.zeros((m, len(ineq)))
    slack[ineq, np.arange(len(ineq))] = 1.0
    sign = np.where(rhs < 0, -1.0, 1.0)
    needs_art = eq | (rhs < 0)
    art_rows = np.flatnonzero(needs_art)
    art = np.zeros((m, len(art_rows)))
    art[art_rows, np.arange(len(art_rows))] = 1.0
    body = np.hstack([A, slack]) * sign[:, None]
    full = np.hstack([body, art])
    N = full.shape[1]
    n_core = n + len(ineq)
    ubs = np.concatenate([span, np.full(len(ineq), np.inf), np.full(len(art_rows), np.inf)])
    basis = np.empty(m, dtype=np.int64)
    slack_of_row = np.full(m, -1)
    slack_of_row[ineq] = n + np.arange(len(ineq))
    art_of_row = np.full(m, -1)
    art_of_row[art_rows] = n_core + np.arange(len(art_rows))
    for i in range(m):
        basis[i] = art_of_row[i] if needs_art[i] else slack_of_row[i]
    tab = _Tableau(full, rhs * sign, ubs, basis, tol)
    iters = 0
    if len(art_rows):
        c1 = np.zeros(N)
        c1[n_core:] = -1.0
        _, k = tab.run(c1)
        iters += k
        infeas = tab.values()[n_core:].sum()
        if infeas > 1e-7 * max(1.0, float(np.abs(rhs).max(initial=0.0))):
            return LpResult("infeasible", None, -math.inf, iters)
        # drive zero-valued artificials out of the basis where possible
        for r in range(m):
            if tab.basis[r] >= n_core:
                row = np.abs(tab.T[r, :n_core])
                row[tab.is_basic[:n_core]] = 0.0
                k = int(np.argmax(row)) if n_core else 0
                if n_core and row[k] > 1e-9:
                    dummy = np.zeros(N)
                    tab.beta[r] = tab.values()[k] if tab.at_upper[k] else 0.0
                    tab.pivot(r, k, dummy)
                    tab.at_upper[k] = False
        blocked = np.zeros(N, dtype=bool)
        blocked[n_core:] = True
    else:
        blocked = None
    c2 = np.zeros(N)
    c2[:n] = c
    status, k = tab.run(c2, blocked)
    iters += k
    if status != "optimal":
        return LpResult(status, None, math.inf, iters)
    x = tab.values()[:n] + lower
    x = np.minimum(np.maximum(x, lower), upper)
    return LpResult("optimal", x, float(c @ x), iters)


# ---------------------------------------------------------------------------
# integer program
# ---------------------------------------------------------------------------

@dataclass
class _Model:
    c: np.ndarray
    A: np.ndarray
    b: np.ndarray
    upper: np.ndarray
    y_index: list[tuple[int, int, int]]  # (t, i, j)
    z_index: list[tuple[int, int, int]]  # (t, i, l)
    cost: np.ndarray  # per y variable


def _build_model(inst: IlpInstance) -> _Model:
    T, n = inst.T, inst.n
    y_index, z_index = [], []
    origin_total = inst.demand.sum(axis=2)
    for t in range(T):
        for i in range(n):
            if origin_total[t, i] == 0:
                continue
            for j in np.flatnonzero(inst.allowed[i]):
                y_index.append((t, i, int(j)))
            for l in np.flatnonzero(inst.demand[t, i]):
                z_index.append((t, i, int(l)))
    ny, nz = len(y_index), len(z_index)
    nv = ny + nz
    rows, rhs = [], []
    # each origin serves no more users than it has pick-ups
    link_rows = {}
    for t in range(T):
        for i in range(n):
            if origin_total[t, i]:
                link_rows[(t, i)] = len(rows)
                rows.append(np.zeros(nv))
                rhs.append(0.0)
    for k, (t, i, _) in enumerate(y_index):
        rows[link_rows[(t, i)]][k] = -1.0
    for k, (t, i, _) in enumerate(z_index):
        rows[link_rows[(t, i)]][ny + k] = 1.0
    # cumulative supply: pick-ups at j through slot t minus arrivals before t stay within S_j(0)
    yt, yj = (np.array([e[0] for e in y_index]), np.array([e[2] for e in y_index])) if ny else (np.zeros(0), np.zeros(0))
    zt, zl = (np.array([e[0] for e in z_index]), np.array([e[2] for e in z_index])) if nz else (np.zeros(0), np.zeros(0))
    for t in range(T):
        for j in range(n):
            row = np.zeros(nv)
            row[:ny] = (yj == j) & (yt <= t)
            row[ny:] = -((zl == j) & (zt < t)).astype(np.float64)
            if row[:ny].any():
                rows.append(row)
                rhs.append(float(inst.supply[j]))
    cost = np.array([inst.costs[t, i, j] for t, i, j in y_index]) if ny else np.zeros(0)
    budget_row = np.zeros(nv)
    budget_row[:ny] = cost
    rows.append(budget_row)
    rhs.append(float(inst.budget))
    upper = np.concatenate(
        [
            np.array([origin_total[t, i] for t, i, _ in y_index], dtype=np.float64),
            np.array([inst.demand[t, i, l] for t, i, l in z_index], dtype=np.float64),
        ]
    )
    c = np.concatenate([np.zeros(ny), np.ones(nz)])
    return _Model(c, np.array(rows).reshape(len(rows), nv), np.array(rhs), upper, y_index, z_index, cost)


# ---------------------------------------------------------------------------
# warm-started node relaxations
# ---------------------------------------------------------------------------

@dataclass
class _Basis:
    basic: np.ndarray  # column index per row of [A | I]
    at_upper: np.ndarray  # nonbasic columns sitting at their upper bound


def _root_relaxation(model: "_Model", tol: float = 1e-9) -> tuple[LpResult, _Basis]:
    """Primal simplex from the all-slack basis; ``x = 0`` is feasible because ``b >= 0``."""
    m, n = model.A.shape
    full = np.hstack([model.A, np.eye(m)])
    ubs = np.concatenate([model.upper, np.full(m, np.inf)])
    tab = _Tableau(full, model.b, ubs, n + np.arange(m), tol)
    c = np.concatenate([model.c, np.zeros(m)])
    _, iters = tab.run(c)
    x = np.clip(tab.values()[:n], 0.0, model.upper)
    return LpResult("optimal", x, float(model.c @ x), iters), _Basis(tab.basis.copy(), tab.at_upper.copy())


class _NodeSolver:
    """Re-optimizes branch-and-bound nodes with the bounded dual simplex.

    A child differs from its parent only in bounds, so the parent's optimal
    basis stays dual feasible and only primal bound violations need
    repair. The tableau of that basis is either handed over directly or
    rebuilt from the basis indices.
    """

    def __init__(self, model: "_Model", tol: float = 1e-9, max_iter: int = 5000):
        self.model = model
        m, n = model.A.shape
        self.m, self.n = m, n
        self.M = np.hstack([model.A, np.eye(m)])
        self.cost = np.concatenate([model.c, np.zeros(m)])
        self.tol = tol
        self.max_iter = max_iter

    def factor(self, basis: _Basis) -> tuple[np.ndarray, np.ndarray] | None:
        """Tableau ``B^-1 [A | I]`` and reduced costs for ``basis``."""
        try:
            T = np.linalg.solve(self.M[:, basis.basic], self.M)
        except np.linalg.LinAlgError:
            return None
        T = np.asfortranarray(T)
        return T, self.cost - self.cost[basis.basic] @ T

    def resolve(self, lo, hi, basis: _Basis, state=None):
        """Returns ``(result, basis, (T, d))`` or None on numerical trouble.

        ``state`` is the tableau of ``basis`` and is overwritten.
        """
        m, n, tol = self.m, self.n, self.tol
        N = n + m
        if state is None:
            state = self.factor(basis)
            if state is None:
                return None
        T, d = state
        low = np.concatenate([lo, np.zeros(m)])
        up = np.concatenate([hi, np.full(m, np.inf)])
        basic = basis.basic.copy()
        is_basic = np.zeros(N, dtype=bool)
        is_basic[basic] = True
        at_upper = basis.at_upper & ~is_basic & np.isfinite(up)
        xn = np.where(at_upper, up, low)
        xn[basic] = 0.0
        beta = T[:, n:] @ (self.model.b - self.M @ xn)  # the slack block of T is B^-1
        movable = ~is_basic & (up - low > tol)
        # the old basis must still price out; otherwise warm starting does not apply
        if np.any(movable & ~at_upper & (d > 1e-7)) or np.any(movable & at_upper & (d < -1e-7)):
            return None
        it = 0
        while True:
            lb, ub = low[basic], up[basic]
            viol = np.maximum(lb - beta, beta - ub)
            r = int(np.argmax(viol)) if m else 0
            if not m or viol[r] <= 1e-7:
                break
            if it >= self.max_iter:
                return None
            rising = beta[r] < lb[r]
            target = lb[r] if rising else ub[r]
            alpha = T[r]
            movable = ~is_basic & (up - low > tol)
            if rising:
                cand = movable & (((alpha < -tol) & ~at_upper) | ((alpha > tol) & at_upper))
            else:
                cand = movable & (((alpha > tol) & ~at_upper) | ((alpha < -tol) & at_upper))
            idx = np.flatnonzero(cand)
            if not len(idx):
                return LpResult("infeasible", None, -math.inf, it), None, None
            ratio = np.abs(d[idx]) / np.abs(alpha[idx])
            ties = idx[ratio <= ratio.min() + tol]
            j = int(ties[np.argmax(np.abs(alpha[ties]))])
            delta = (beta[r] - target) / alpha[j]
            entering_value = (up[j] if at_upper[j] else low[j]) + delta
            beta -= delta * T[:, j]
            leaving = basic[r]
            row = T[r, :] / T[r, j]
            col = T[:, j].copy()
            col[r] = 0.0
            T = dger(-1.0, col, row, a=T, overwrite_a=True)
            T[r, :] = row
            d -= d[j] * row
            beta[r] = entering_value
            is_basic[leaving] = False
            is_basic[j] = True
            at_upper[leaving] = not rising
            at_upper[j] = False
            basic[r] = j
            it += 1
        x = np.where(at_upper, up, low)
        x[basic] = beta
        x = np.clip(x[:n], lo, hi)
        if np.any(self.model.A @ x > self.model.b + 1e-6):
            return None
        return LpResult("optimal", x, float(self.model.c @ x), it), _Basis(basic, at_upper), (T, d)

@dataclass
class IlpSolution:
    objective: int
    assignment: dict[tuple[int, int, int, int], int]
    exact: bool
    lp_bound: float
    nodes: int
    spent: float = 0.0
    end_supply: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {
            "objective": self.objective,
            "exact": self.exact,
            "lp_bound": self.lp_bound,
            "nodes": self.nodes,
            "spent": self.spent,
            "assignment": [[*k, v] for k, v in sorted(self.assignment.items())],
        }


def _feasible(model: _Model, v: np.ndarray, tol: float = 1e-6) -> bool:
    return bool(np.all(model.A @ v <= model.b + tol) and np.all(v >= -tol) and np.all(v <= model.upper + tol))


def _repair(model: _Model, v: np.ndarray, supply: np.ndarray) -> np.ndarray:
    """Feasible integral plan near ``v``: floor, then replay the slots in order.

    Pick-ups are capped by the bikes actually parked at each region, served
    users by the pick-ups of their origin, and pick-ups nobody rides are
    returned (priciest first). Flooring only lowers spending, so the budget
    holds; the result is always feasible.
    """
    w = np.floor(v + INT_TOL)
    ny = len(model.y_index)
    s = supply.astype(np.float64).copy()
    by_slot_y: dict[int, list[int]] = {}
    by_slot_z: dict[int, list[int]] = {}
    for k, (t, _, _) in enumerate(model.y_index):
        by_slot_y.setdefault(t, []).append(k)
    for k, (t, _, _) in enumerate(model.z_index):
        by_slot_z.setdefault(t, []).append(ny + k)
    for t in sorted(set(by_slot_y) | set(by_slot_z)):
        picks: dict[int, list[int]] = {}
        for k in by_slot_y.get(t, []):
            _, i, j = model.y_index[k]
            take = min(w[k], s[j])
            w[k] = take
            s[j] -= take
            picks.setdefault(i, []).append(k)
        room = {i: sum(w[k] for k in ks) for i, ks in picks.items()}
        for k in by_slot_z.get(t, []):
            _, i, _ = model.z_index[k - ny]
            take = min(w[k], room.get(i, 0.0))
            w[k] = take
            room[i] = room.get(i, 0.0) - take
        for i, extra in room.items():
            for k in sorted(picks[i], key=lambda k: -model.cost[k]):
                if extra <= 0:
                    break
                back = min(w[k], extra)
                w[k] -= back
                s[model.y_index[k][2]] += back
                extra -= back
        for k in by_slot_z.get(t, []):
            s[model.z_index[k - ny][2]] += w[k]
    return w


def _split(model: _Model, v: np.ndarray) -> dict[tuple[int, int, int, int], int]:
    """Turn integral ``(y, z)`` into ``x[t, i, j, l]``, dropping pick-ups nobody rides."""
    ny = len(model.y_index)
    ys: dict[tuple[int, int], list[list]] = {}
    zs: dict[tuple[int, int], list[list]] = {}
    for k, (t, i, j) in enumerate(model.y_index):
        ys.setdefault((t, i), []).append([j, int(round(v[k])), model.cost[k]])
    for k, (t, i, l) in enumerate(model.z_index):
        zs.setdefault((t, i), []).append([l, int(round(v[ny + k]))])
    out: dict[tuple[int, int, int, int], int] = {}
    for key, zl in zs.items():
        t, i = key
        # free local bikes first, then the cheapest neighbors
        yl = sorted(ys.get(key, []), key=lambda e: (e[2], e[0] != i, e[0]))
        p = 0
        for l, need in zl:
            while need > 0:
                while yl[p][1] == 0:
                    p += 1
                j = yl[p][0]
                take = min(need, yl[p][1])
                out[(t, i, j, l)] = out.get((t, i, j, l), 0) + take
                yl[p][1] -= take
                need -= take
    return {k: v for k, v in out.items() if v}


def assignment_spend(inst: IlpInstance, assignment: Mapping[tuple[int, int, int, int], int]) -> float:
    return float(sum(cnt * inst.costs[t, i, j] for (t, i, j, _), cnt in assignment.items()))


def end_supply(inst: IlpInstance, assignment: Mapping[tuple[int, int, int, int], int]) -> np.ndarray:
    """Supply after the instance's last slot under same-slot trip completion."""
    s = inst.supply.astype(np.int64).copy()
    for (_, _, j, l), cnt in assignment.items():
        s[j] -= cnt
        s[l] += cnt
    return s


def check_assignment(inst: IlpInstance, assignment: Mapping[tuple[int, int, int, int], int], tol: float = 1e-6) -> None:
    """Raise ``AssertionError`` unless ``assignment`` satisfies every constraint of ``inst``."""
    T, n = inst.T, inst.n
    served = np.zeros((T, n, n), dtype=np.int64)
    picked = np.zeros((T, n), dtype=np.int64)
    arrive = np.zeros((T, n), dtype=np.int64)
    for (t, i, j, l), cnt in assignment.items():
        assert cnt >= 0 and inst.allowed[i, j], (t, i, j, l)
        served[t, i, l] += cnt
        picked[t, j] += cnt
        arrive[t, l] += cnt
    assert (served <= inst.demand).all(), "demand exceeded"
    s = inst.supply.astype(np.int64).copy()
    for t in range(T):
        assert (picked[t] <= s).all(), f"supply exceeded in slot {t}"
        s = s - picked[t] + arrive[t]
    assert assignment_spend(inst, assignment) <= inst.budget + tol, "budget exceeded"


def solve_ilp(inst: IlpInstance, node_cap: int = NODE_CAP, warm_start: bool = True) -> IlpSolution:
    """Exact optimum by best-bound branch-and-bound on the LP relaxation.

    Children re-optimize from their parent's basis with the dual simplex
    (``warm_start=False`` solves every node from scratch instead; both give
    the same optimum).

    The objective is integral, so nodes are ordered by the floor of their LP
    bound, deeper nodes first among equals (many nodes share a bound, and
    diving finds incumbents quickly). Branches on the most fractional
    variable. When ``node_cap`` nodes have
    been expanded the search stops; the result then carries
    ``exact=False``, the best integral incumbent and the best open LP bound.
    """
    model = _build_model(inst)
    nv = len(model.c)
    if nv == 0:
        return IlpSolution(0, {}, True, 0.0, 0, 0.0, inst.supply.copy())
    lo0 = np.zeros(nv)
    root, root_basis = _root_relaxation(model)
    best_v = np.zeros(nv)
    best = 0.0
    counter = itertools.count()


    def entry(res: LpResult, basis, depth: int, lo, hi) -> tuple:
        return (-math.floor(res.objective + INT_TOL), -depth, next(counter), lo, hi, res, basis)

    solver = _NodeSolver(model)
    tableaus: dict[int, tuple] = {}  # tableaus of the most recently pushed children

    def relax(lo, hi, basis, state):
        if warm_start and basis is not None:
            warm = solver.resolve(lo, hi, basis, state)
            if warm is not None:
                return warm
        return solve_lp(model.c, model.A, model.b, lo, hi), None, None

    heap = [entry(root, root_basis, 0, lo0, model.upper.copy())]
    nodes = 0
    exact = True
    while heap:
        item = heapq.heappop(heap)
        neg_bound, neg_depth, key, lo, hi, res, basis = item
        state = tableaus.pop(key, None)
        if -neg_bound <= best:
            continue
        if nodes >= node_cap:
            heapq.heappush(heap, item)
            exact = False
            break
        nodes += 1
        v = res.x
        frac = np.abs(v - np.round(v))
        if frac.max() <= INT_TOL:
            v = np.round(v)
            if model.c @ v > best:
                best, best_v = float(model.c @ v), v
            continue
        heur = _repair(model, v, inst.supply)
        if model.c @ heur > best and _feasible(model, heur):
            best, best_v = float(model.c @ heur), heur
        k = int(np.argmin(np.abs(frac - 0.5)))
        down_hi = hi.copy()
        down_hi[k] = math.floor(v[k])
        up_lo = lo.copy()
        up_lo[k] = math.ceil(v[k])
        children = [(lo, down_hi), (up_lo, hi)]
        if v[k] - math.floor(v[k]) > 0.5:  # explore the nearer rounding first
            children.reverse()
        if warm_start and basis is not None and state is None:
            state = solver.factor(basis)
        tableaus.clear()
        for n_child, (new_lo, new_hi) in enumerate(children):
            start = state
            if state is not None and n_child == 0:
                start = (state[0].copy(order="F"), state[1].copy())
            child, child_basis, child_state = relax(new_lo, new_hi, basis, start)
            if child.status == "optimal" and math.floor(child.objective + INT_TOL) > best:
                item = entry(child, child_basis, 1 - neg_depth, new_lo, new_hi)
                heapq.heappush(heap, item)
                if child_state is not None:
                    tableaus[item[2]] = child_state
    open_bound = max((h[5].objective for h in heap), default=best) if not exact else best
    assert root.objective >= best - 1e-6, "LP relaxation below an integral solution"
    assignment = _split(model, best_v)
    check_assignment(inst, assignment)
    objective = int(round(best))
    assert sum(assignment.values()) == objective
    return IlpSolution(
        objective=objective,
        assignment=assignment,
        exact=exact,
        lp_bound=float(root.objective if exact else max(open_bound, best)),
        nodes=nodes,
        spent=assignment_spend(inst, assignment),
        end_supply=end_supply(inst, assignment),
    )


@dataclass
class HorizonResult:
    V: int
    served: int
    windows: list[IlpSolution] = field(default_factory=list)

    @property
    def exact(self) -> bool:
        return all(w.exact for w in self.windows)


def v_horizon_optimize(inst: IlpInstance, V: int, node_cap: int = NODE_CAP) -> HorizonResult:
    """Solve consecutive ``V``-slot windows, committing each before moving on.

    Each window starts from the supply and remaining budget the previous
    windows left behind. The last window is truncated when ``V`` does not
    divide the horizon.
    """
    if V < 1:
        raise ValueError("V must be positive")
    supply = inst.supply.copy()
    budget = float(inst.budget)
    out = HorizonResult(V=V, served=0)
    for start in range(0, inst.T, V):
        win = inst.window(start, min(start + V, inst.T), supply, max(budget, 0.0))
        sol = solve_ilp(win, node_cap)
        out.windows.append(sol)
        out.served += sol.objective
        budget -= sol.spent
        supply = sol.end_supply
    return out


def collect_pair_costs(env, seeds: Sequence[int]) -> dict[tuple[int, int, int], list[float]]:
    """Walking costs to every neighbor's nearest bike, seen by users left without a local bike.

    Runs zero-incentive episodes of ``env`` and returns samples keyed by ``(i, j, t)``.
    """
    from .agents.base import ZeroPricer, run_episode

    record = env.config.record_costs
    env.config.record_costs = True
    out: dict[tuple[int, int, int], list[float]] = {}
    try:
        zero = ZeroPricer(env.config.max_price).fit(env)
        for seed in seeds:
            run_episode(zero, env, seed)
            for t, i, j, c in env.cost_samples:
                out.setdefault((i, j, t), []).append(c)
    finally:
        env.config.record_costs = record
    return out


def build_instance(env, seed: int, cost_seeds: Sequence[int] | None = None, cost_seed: int | None = None) -> IlpInstance:
    """The offline program matched to one simulator episode.

    Demand is the scenario's demand tensor over one day, initial supply is
    the fleet placement ``env.reset(seed)`` produces, and costs are drawn
    from zero-incentive episodes on ``cost_seeds`` (default: ``seed`` alone).
    Pairs that were never observed fall back to the walking cost between
    region centers.
    """
    env.reset(seed)
    supply = env.supply().copy()
    samples = collect_pair_costs(env, [seed] if cost_seeds is None else cost_seeds)
    grid = env.grid
    allowed = neighbor_mask(grid)
    for i, j in zip(*np.nonzero(allowed)):
        i, j = int(i), int(j)
        if i != j and not any((i, j, t) in samples for t in range(env.T)):
            (xi, yi), (xj, yj) = grid.cell_center(i), grid.cell_center(j)
            samples[(i, j, 0)] = [env.alpha * ((xi - xj) ** 2 + (yi - yj) ** 2)]
    costs = sample_costs(samples, allowed, env.T, seed if cost_seed is None else cost_seed)
    costs = np.where(np.isfinite(costs), costs, 0.0)
    return IlpInstance(env.config.demand.counts, supply, costs, allowed, float(env.config.budget))
