"""Estimator-style base class and the episode loop shared by every pricer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from ..core import DEFAULT_MAX_PRICE, EpisodeLog, ObservationLayout
from ..sim import BikeShareEnv, StepOutcome


class PricingAgent(BaseEstimator):
    """Common surface of all pricing policies.

    ``fit(env)`` learns from a simulator, ``predict(X)`` maps a 2-D array of
    flat observations to a 2-D array of prices, and ``act``/``observe`` drive
    one episode step by step. Agents that keep adapting online (bandits)
    update themselves in ``observe``.
    """

    max_price: float = DEFAULT_MAX_PRICE

    # -- estimator API -------------------------------------------------
    def fit(self, env: BikeShareEnv, y=None):
        self._bind(env)
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "n_regions_")
        X = check_array(X, dtype=np.float64, ensure_all_finite=True)
        if X.shape[1] != self.layout_.size:
            raise ValueError(f"expected observations of width {self.layout_.size}, got {X.shape[1]}")
        return np.clip(self._predict(X), 0.0, self.max_price)

    def _predict(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _bind(self, env: BikeShareEnv) -> None:
        self.n_regions_ = env.n
        self.layout_ = env.layout
        self.grid_ = env.grid

    # -- episode API ---------------------------------------------------
    def begin_episode(self, env: BikeShareEnv) -> None:
        pass

    def act(self, obs: np.ndarray) -> np.ndarray:
        return self.predict(np.asarray(obs, dtype=np.float64)[None, :])[0]

    def observe(self, obs: np.ndarray, action: np.ndarray, outcome: StepOutcome) -> None:
        pass


class ZeroPricer(PricingAgent):
    """No incentives at all: the operator's original system."""

    def __init__(self, max_price: float = DEFAULT_MAX_PRICE):
        self.max_price = max_price

    def _predict(self, X):
        return np.zeros((X.shape[0], self.n_regions_))


@dataclass
class EpisodeResult:
    log: EpisodeLog
    rewards: list[int] = field(default_factory=list)
    actions: list[np.ndarray] = field(default_factory=list)

    @property
    def served(self) -> int:
        return self.log.served

    @property
    def unsatisfied(self) -> int:
        return self.log.unsatisfied


def run_episode(agent: PricingAgent, env: BikeShareEnv, seed: int | None = None, keep_actions: bool = False) -> EpisodeResult:
    """Roll out one full episode of ``agent`` without learning updates beyond ``observe``."""
    obs = env.reset(seed)
    agent.begin_episode(env)
    result = EpisodeResult(log=env.log)
    while not env.done:
        a = agent.act(obs)
        out = env.step(a)
        agent.observe(obs, a, out)
        result.rewards.append(out.reward)
        if keep_actions:
            result.actions.append(np.asarray(a).copy())
        obs = out.next_observation
    result.log = env.log
    return result


def layout_of(agent: PricingAgent) -> ObservationLayout:
    check_is_fitted(agent, "layout_")
    return agent.layout_
