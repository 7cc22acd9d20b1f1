"""Service-level and distribution metrics."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .core import EpisodeLog

KL_EPSILON = 1e-9


def dur(un_baseline: float, un_alg: float) -> float:
    """Decreased un-service ratio in percent: ``(UN_base - UN_alg) / UN_base * 100``.

    Negative when the algorithm leaves more requests unserved than the baseline.
    """
    if un_baseline <= 0:
        raise ValueError("the baseline must leave at least one request unserved")
    return (un_baseline - un_alg) / un_baseline * 100.0


def _smoothed(counts: np.ndarray, eps: float) -> np.ndarray:
    p = counts / counts.sum()
    p = np.where(p == 0.0, eps, p)
    return p / p.sum()


def kl_divergence(p_begin: Sequence[float], q_end: Sequence[float], eps: float = KL_EPSILON) -> float:
    """``D(begin || end)`` in nats between two bike censuses.

    Both censuses are normalized; zero cells get mass ``eps`` before
    renormalizing, so the divergence stays finite.
    """
    p = np.asarray(p_begin, dtype=np.float64)
    q = np.asarray(q_end, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError(f"census shapes differ: {p.shape} vs {q.shape}")
    if (p < 0).any() or (q < 0).any():
        raise ValueError("censuses must be nonnegative")
    if p.sum() <= 0 or q.sum() <= 0:
        raise ValueError("censuses must contain at least one bike")
    p = _smoothed(p, eps)
    q = _smoothed(q, eps)
    return float(max(np.sum(p * np.log(p / q)), 0.0))


def unservice_count(log: EpisodeLog) -> int:
    """Unsatisfied requests summed over all slots of a finished episode."""
    return int(sum(sum(s["unsatisfied"]) for s in log.slots))


def episode_kl(log: EpisodeLog) -> float:
    if log.census_begin is None or log.census_end is None:
        raise ValueError("episode has no start/end census")
    return kl_divergence(log.census_begin, log.census_end)


def baseline_run(env, seed: int | None = None) -> EpisodeLog:
    """Roll out the zero-incentive system on ``env`` with ``seed``; returns the episode log."""
    from .agents.base import ZeroPricer, run_episode

    zero = ZeroPricer(env.config.max_price).fit(env)
    return run_episode(zero, env, seed).log
