"""Pricing policies."""

from .actor_critic import ActorCriticPricer, DDPGPricer, HRAPricer, HRPPricer
from .base import EpisodeResult, PricingAgent, ZeroPricer, run_episode
from .replay import ReplayBuffer, Transition
from .simple import DBPUCBPricer, OptFixPricer, PacedUCB, RandomPricer, collect_cost_samples, optfix_prices

AGENT_CLASSES = {
    "zero": ZeroPricer,
    "random": RandomPricer,
    "optfix": OptFixPricer,
    "dbpucb": DBPUCBPricer,
    "ddpg": DDPGPricer,
    "hra": HRAPricer,
    "hrp": HRPPricer,
}

__all__ = [
    "AGENT_CLASSES",
    "ActorCriticPricer",
    "DBPUCBPricer",
    "DDPGPricer",
    "EpisodeResult",
    "HRAPricer",
    "HRPPricer",
    "OptFixPricer",
    "PacedUCB",
    "PricingAgent",
    "RandomPricer",
    "ReplayBuffer",
    "Transition",
    "ZeroPricer",
    "collect_cost_samples",
    "optfix_prices",
    "run_episode",
]
