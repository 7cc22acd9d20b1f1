"""Non-learning and bandit pricers: Random, OPT-FIX, DBP-UCB."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..core import DEFAULT_MAX_PRICE
from ..sim import BikeShareEnv
from .base import PricingAgent, ZeroPricer, run_episode


class RandomPricer(PricingAgent):
    """Independent uniform prices on ``[0, max_price]``; nothing once the budget is gone."""

    def __init__(self, max_price: float = DEFAULT_MAX_PRICE, random_state: int | None = None):
        self.max_price = max_price
        self.random_state = random_state

    def fit(self, env, y=None):
        super().fit(env)
        self.rng_ = np.random.default_rng(self.random_state)
        return self

    def _predict(self, X):
        p = self.rng_.uniform(0.0, self.max_price, size=(X.shape[0], self.n_regions_))
        p[self.layout_.budget(X) <= 0.0] = 0.0
        return p


def optfix_prices(
    cost_samples: Sequence[Sequence[float]],
    budget: float,
    demand: Sequence[float],
    offers_per_region: Sequence[float] | None = None,
    n_quantiles: int = 21,
) -> np.ndarray:
    """Fixed per-region prices maximizing expected accepted offers under a budget share.

    Candidate prices are ``n_quantiles`` evenly spaced quantiles of each
    region's cost samples. A user accepts when the price covers his cost, so
    price ``p`` wins ``N * F(p)`` offers and spends ``p * N * F(p)``, where
    ``N`` is the region's expected number of offers. Region budgets are
    proportional to ``demand``. Ties go to the cheaper price.
    """
    demand = np.asarray(demand, dtype=np.float64)
    n = len(cost_samples)
    if len(demand) != n:
        raise ValueError("demand and cost samples disagree on region count")
    if offers_per_region is None:
        offers_per_region = [len(c) for c in cost_samples]
    share = budget * demand / demand.sum() if demand.sum() > 0 else np.zeros(n)
    prices = np.zeros(n)
    for i, samples in enumerate(cost_samples):
        c = np.sort(np.asarray(samples, dtype=np.float64))
        n_off = float(offers_per_region[i])
        if n_off <= 0 or not len(c):
            continue
        grid = np.unique(np.quantile(c, np.linspace(0.0, 1.0, n_quantiles), method="lower"))
        best = (0.0, 0.0)  # (expected acceptances, -price)
        for p in grid:
            if p <= 0:
                continue
            accept = np.searchsorted(c, p, side="right") / len(c)
            spend = p * accept * n_off
            if spend > share[i] + 1e-12:
                continue
            key = (accept * n_off, -p)
            if key > best:
                best = key
        prices[i] = -best[1]
    return prices


class OptFixPricer(PricingAgent):
    """One constant price vector for the whole day, chosen offline from known user costs."""

    def __init__(self, max_price: float = DEFAULT_MAX_PRICE, n_quantiles: int = 21, calibration_seed: int | None = None):
        self.max_price = max_price
        self.n_quantiles = n_quantiles
        self.calibration_seed = calibration_seed

    def fit(self, env: BikeShareEnv, y=None):
        super().fit(env)
        samples = collect_cost_samples(env, self.calibration_seed)
        if not any(len(s) for s in samples):
            self.prices_ = np.zeros(env.n)
            return self
        self.prices_ = self.calibrate(samples, env.config.budget, env.config.demand.origin_totals())
        return self

    def calibrate(self, cost_samples, budget, demand, offers_per_region=None) -> np.ndarray:
        if not any(len(s) for s in cost_samples):
            raise ValueError("no cost samples")
        return np.minimum(optfix_prices(cost_samples, budget, demand, offers_per_region, self.n_quantiles), self.max_price)

    def _predict(self, X):
        return np.tile(self.prices_, (X.shape[0], 1))


def collect_cost_samples(env: BikeShareEnv, seed: int | None = None) -> list[list[float]]:
    """Cheapest-offer walking costs per region, observed along a zero-incentive episode."""
    record = env.config.record_costs
    env.config.record_costs = True
    try:
        zero = ZeroPricer(env.config.max_price).fit(env)
        run_episode(zero, env, seed)
        out: list[list[float]] = [[] for _ in range(env.n)]
        for _, i, c in env.min_cost_samples:
            out[i].append(c)
    finally:
        env.config.record_costs = record
    return out


class PacedUCB:
    """UCB over a price grid for one region, with budget pacing.

    The index of arm ``k`` is ``clip(mean_k + sqrt(2 ln t / n_k), 0, 1) * v_k``
    where ``v_k = min(1, pace / price_k)`` is the fraction of requests the
    paced budget can afford at that price. Arms priced above the remaining
    budget are skipped; unpulled affordable arms go first.
    """

    def __init__(self, prices: Sequence[float]):
        self.prices = np.asarray(prices, dtype=np.float64)
        self.counts = np.zeros(len(self.prices), dtype=np.int64)
        self.means = np.zeros(len(self.prices))
        self.t = 0

    def indices(self, pace: float = np.inf) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            bonus = np.sqrt(2.0 * np.log(max(self.t, 1)) / self.counts)
            ucb = np.clip(self.means + bonus, 0.0, 1.0)
            value = np.where(self.prices > 0, np.minimum(1.0, pace / self.prices), 1.0)
        idx = ucb * value
        idx[self.counts == 0] = np.inf
        return idx

    def select(self, remaining_budget: float = np.inf, pace: float = np.inf) -> int:
        affordable = self.prices <= remaining_budget
        if not affordable[1:].any():
            return 0
        idx = self.indices(pace)
        idx[~affordable] = -np.inf
        return int(np.argmax(idx))

    def update(self, arm: int, reward: float) -> None:
        self.t += 1
        self.counts[arm] += 1
        self.means[arm] += (reward - self.means[arm]) / self.counts[arm]


class DBPUCBPricer(PricingAgent):
    """Independent budget-paced UCB bandit per region over a uniform price grid.

    The reward of a pulled arm is the slot's acceptance rate among requests
    that needed an offer in that region. Pacing spreads the remaining budget
    over the expected number of remaining offer-needing requests, estimated
    from a running mean of past slots.
    """

    def __init__(self, max_price: float = DEFAULT_MAX_PRICE, n_arms: int = 11, n_episodes: int = 100, random_state: int | None = None):
        self.max_price = max_price
        self.n_arms = n_arms
        self.n_episodes = n_episodes
        self.random_state = random_state

    def fit(self, env: BikeShareEnv, y=None):
        super().fit(env)
        grid = np.linspace(0.0, self.max_price, self.n_arms)
        self.bandits_ = [PacedUCB(grid) for _ in range(env.n)]
        self.need_rate_ = 0.0
        self.slots_seen_ = 0
        self.horizon_ = env.horizon
        base = 0 if self.random_state is None else self.random_state
        for ep in range(self.n_episodes):
            run_episode(self, env, seed=base * 100_003 + ep)
        return self

    def begin_episode(self, env):
        self.horizon_ = env.horizon
        self.step_ = 0
        self.arms_ = np.zeros(self.n_regions_, dtype=np.int64)

    def _pace(self, rb: float) -> float:
        remaining = max(self.horizon_ - getattr(self, "step_", 0), 1)
        expected = max(self.need_rate_ * remaining, 1.0)
        return rb / expected

    def _predict(self, X):
        out = np.zeros((X.shape[0], self.n_regions_))
        for row, x in enumerate(X):
            rb = float(self.layout_.budget(x))
            pace = self._pace(rb)
            for i, b in enumerate(self.bandits_):
                out[row, i] = b.prices[b.select(rb, pace)]
        return out

    def act(self, obs):
        rb = float(self.layout_.budget(obs))
        pace = self._pace(rb)
        self.arms_ = np.array([b.select(rb, pace) for b in self.bandits_])
        return np.array([b.prices[k] for b, k in zip(self.bandits_, self.arms_)])

    def observe(self, obs, action, outcome):
        paid = outcome.incentivized
        need = outcome.unsatisfied + paid
        for i, b in enumerate(self.bandits_):
            if need[i] > 0:
                b.update(int(self.arms_[i]), paid[i] / need[i])
        self.slots_seen_ += 1
        self.need_rate_ += (float(need.sum()) - self.need_rate_) / self.slots_seen_
        self.step_ += 1
