"""DDPG, HRA and HRP pricers.

All three share the same training loop (warm-up buffer fill with random
prices, then one minibatch update per environment step with Gaussian
exploration noise and soft target updates). Critic and actor gradients of
one update are both taken against the pre-update critic, which lets the
recurrent encoding of the minibatch states be computed once. They differ only in the critic:

* DDPG: one MLP on the concatenated state and action.
* HRA: a sum of per-region GRU sub-critics, each regressed on its own
  region's reward.
* HRP: the same sum plus a localized correction per region that also sees
  the neighboring regions' states; trained on the total reward.
"""

from __future__ import annotations

import copy
import logging
from pathlib import Path

import numpy as np

from ..core import BASE_REGION_FEATURES, DEFAULT_MAX_PRICE
from ..nn import Adam, ParamBlock, prefixed, soft_update
from ..sim import BikeShareEnv
from .base import PricingAgent
from .networks import Actor, DecomposedCritic, MLPCritic
from .replay import ReplayBuffer, Transition

logger = logging.getLogger(__name__)


class ActorCriticPricer(PricingAgent):
    """Deterministic actor-critic pricer; subclasses pick the critic."""

    def __init__(
        self,
        max_price: float = DEFAULT_MAX_PRICE,
        gamma: float = 0.99,
        actor_lr: float = 1e-4,
        critic_lr: float = 1e-3,
        tau: float = 1e-3,
        batch_size: int = 64,
        buffer_size: int = 100_000,
        warmup: int = 1000,
        n_episodes: int = 100,
        noise_start: float = 0.5,
        noise_end: float = 0.05,
        hidden: tuple[int, ...] = (64, 64),
        gru_hidden: int = 32,
        local_hidden: int = 32,
        clip_norm: float | None = 10.0,
        reward_scale: float = 0.01,
        updates_per_step: int = 1,
        random_state: int | None = None,
    ):
        self.max_price = max_price
        self.gamma = gamma
        self.actor_lr = actor_lr
        self.critic_lr = critic_lr
        self.tau = tau
        self.batch_size = batch_size
        self.buffer_size = buffer_size
        self.warmup = warmup
        self.n_episodes = n_episodes
        self.noise_start = noise_start
        self.noise_end = noise_end
        self.hidden = hidden
        self.gru_hidden = gru_hidden
        self.local_hidden = local_hidden
        self.clip_norm = clip_norm
        self.reward_scale = reward_scale
        self.updates_per_step = updates_per_step
        self.random_state = random_state

    # -- construction ----------------------------------------------------
    def _build_critic(self, rng: np.random.Generator):
        raise NotImplementedError

    def initialize(self, env: BikeShareEnv) -> "ActorCriticPricer":
        """Create networks, targets, optimizers and an empty buffer for ``env``'s shapes."""
        self._bind(env)
        seed = self.random_state
        self.rng_ = np.random.default_rng(seed)
        net_rng = np.random.default_rng(self.rng_.integers(2**63))
        obs_dim = self.layout_.size
        self.actor_ = Actor(obs_dim, self.n_regions_, self.hidden, net_rng)
        self.critic_ = self._build_critic(net_rng)
        self.actor_target_ = copy.deepcopy(self.actor_)
        self.critic_target_ = copy.deepcopy(self.critic_)
        self.actor_opt_ = Adam(self.actor_.params, lr=self.actor_lr, clip_norm=self.clip_norm)
        self.critic_opt_ = Adam(self.critic_.params, lr=self.critic_lr, clip_norm=self.clip_norm)
        self.buffer_ = ReplayBuffer(self.buffer_size, obs_dim, self.n_regions_, seed=int(self.rng_.integers(2**63)))
        self.obs_scale_ = np.ones(obs_dim)
        self.loss_history_: list[float] = []
        self.q_history_: list[float] = []
        self.diagnostics_: list[dict] = []
        self.episodes_trained_ = 0
        return self

    # -- scaling ---------------------------------------------------------
    def fit_scaler(self, observations: np.ndarray, budget: float) -> None:
        """Per-feature-type scales shared by all regions (99th percentile, floored at 1)."""
        lay = self.layout_
        blocks = lay.regions(observations)
        scale_blocks = np.ones(lay.region_width)
        for k in range(BASE_REGION_FEATURES):
            scale_blocks[k] = max(1.0, float(np.percentile(blocks[:, :, k], 99)))
        self.obs_scale_ = np.concatenate([np.tile(scale_blocks, lay.n), [max(1.0, float(budget))]])

    def scale_obs(self, X: np.ndarray) -> np.ndarray:
        return X / self.obs_scale_

    # -- policy ----------------------------------------------------------
    def policy_fraction(self, X: np.ndarray) -> np.ndarray:
        return self.actor_.forward(self.scale_obs(X))[0]

    def _predict(self, X):
        return self.max_price * self.policy_fraction(X)

    def noise_sigma(self, episode: int) -> float:
        if self.n_episodes <= 1:
            return self.noise_end
        frac = min(episode / (self.n_episodes - 1), 1.0)
        return self.noise_start + frac * (self.noise_end - self.noise_start)

    def explore(self, obs: np.ndarray, sigma: float) -> np.ndarray:
        a = self.max_price * self.policy_fraction(obs[None, :])[0]
        a = a + self.rng_.normal(0.0, sigma, size=a.shape)
        return np.clip(a, 0.0, self.max_price)

    # -- training --------------------------------------------------------
    def store(self, obs, action, outcome) -> None:
        self.buffer_.add(
            Transition(
                s=obs,
                a=np.asarray(action, dtype=np.float64),
                reward=float(outcome.reward),
                s_next=outcome.next_observation,
                done=outcome.episode_done,
                region_rewards=outcome.served.astype(np.float64),
            )
        )

    def warm_up(self, env: BikeShareEnv, seed_base: int = 0) -> int:
        """Fill the buffer with uniformly random prices until ``warmup`` transitions are stored."""
        episodes = 0
        observations = []
        while len(self.buffer_) < max(self.warmup, self.batch_size):
            obs = env.reset(seed_base + episodes)
            while not env.done:
                a = self.rng_.uniform(0.0, self.max_price, size=self.n_regions_)
                out = env.step(a)
                self.store(obs, a, out)
                observations.append(obs)
                obs = out.next_observation
            episodes += 1
        self.fit_scaler(np.asarray(observations), env.config.budget)
        return episodes

    def _batch(self, batch: dict) -> tuple:
        s = self.scale_obs(batch["s"])
        s2 = self.scale_obs(batch["s2"])
        a = batch["a"] / self.max_price
        r = batch["r"] * self.reward_scale
        r_region = batch["r_region"] * self.reward_scale
        not_done = 1.0 - batch["done"]
        return s, a, r, r_region, s2, not_done

    def _critic_grads(self, s, a, r, r_region, s2, not_done, encoding=None) -> tuple[float, float, dict]:
        """Squared TD loss, mean Q and parameter gradients of the loss."""
        a2 = self.actor_target_.forward(s2)[0]
        q2 = self.critic_target_.forward(s2, a2)[0]
        y = r + self.gamma * not_done * q2
        out = self.critic_.forward(s, a, encoding)
        q, cache = out[0], out[-1]
        err = q - y
        loss = float(np.mean(err**2))
        grads = self.critic_.backward(2.0 * err / len(err), cache)[0]
        return loss, float(np.mean(q)), grads

    def _actor_grads(self, s, encoding=None) -> dict:
        """Gradients of ``-mean Q(s, mu(s))`` with respect to the actor parameters."""
        a, acache = self.actor_.forward(s)
        out = self.critic_.forward(s, a, encoding)
        B = s.shape[0]
        dq_da = self.critic_.action_gradient(np.full(B, -1.0 / B), out[-1])
        return self.actor_.backward(dq_da, acache)[1]

    def train_step(self, batch: dict | None = None) -> dict:
        """One critic step, one actor step and soft target updates on a minibatch."""
        if batch is None:
            if len(self.buffer_) < self.batch_size:
                raise ValueError("buffer holds fewer transitions than one minibatch")
            batch = self.buffer_.sample(self.batch_size)
        s, a, r, r_region, s2, not_done = self._batch(batch)
        encoding = self.critic_.encode(s)
        loss, mean_q, critic_grads = self._critic_grads(s, a, r, r_region, s2, not_done, encoding)
        actor_grads = self._actor_grads(s, encoding)
        self.critic_opt_.step(critic_grads)
        self.actor_opt_.step(actor_grads)
        soft_update(self.actor_target_.params, self.actor_.params, self.tau)
        soft_update(self.critic_target_.params, self.critic_.params, self.tau)
        return {"critic_loss": loss, "mean_q": mean_q}

    def fit(self, env: BikeShareEnv, y=None):
        self.initialize(env)
        base = 0 if self.random_state is None else int(self.random_state) * 1_000_003
        warm = self.warm_up(env, seed_base=base)
        logger.debug("%s warm-up: %d episodes, %d transitions", type(self).__name__, warm, len(self.buffer_))
        for ep in range(self.n_episodes):
            self.train_episode(env, seed=base + warm + ep, episode=ep)
        return self

    def train_episode(self, env: BikeShareEnv, seed: int | None = None, episode: int | None = None) -> dict:
        episode = self.episodes_trained_ if episode is None else episode
        sigma = self.noise_sigma(episode)
        obs = env.reset(seed)
        losses, qs = [], []
        total = 0
        while not env.done:
            a = self.explore(obs, sigma)
            out = env.step(a)
            self.store(obs, a, out)
            total += out.reward
            for _ in range(self.updates_per_step):
                d = self.train_step()
                losses.append(d["critic_loss"])
                qs.append(d["mean_q"])
            obs = out.next_observation
        rec = {
            "episode": episode,
            "critic_loss": float(np.mean(losses)) if losses else float("nan"),
            "mean_q": float(np.mean(qs)) if qs else float("nan"),
            "reward": total,
            "noise": sigma,
        }
        self.loss_history_.append(rec["critic_loss"])
        self.q_history_.append(rec["mean_q"])
        self.diagnostics_.append(rec)
        self.episodes_trained_ += 1
        return rec

    # -- checkpoints -----------------------------------------------------
    def checkpoint_params(self) -> ParamBlock:
        block = ParamBlock()
        block.update(prefixed(self.actor_.params, "actor."))
        block.update(prefixed(self.critic_.params, "critic."))
        block["obs_scale"] = self.obs_scale_
        return block

    def save_checkpoint(self, path: str | Path) -> None:
        self.checkpoint_params().save(path)

    def load_checkpoint(self, path: str | Path) -> None:
        loaded = ParamBlock.load(path)
        self.obs_scale_ = loaded.pop("obs_scale").copy()
        self.actor_.params.copy_from({k[6:]: v for k, v in loaded.items() if k.startswith("actor.")})
        self.critic_.params.copy_from({k[7:]: v for k, v in loaded.items() if k.startswith("critic.")})
        self.actor_target_ = copy.deepcopy(self.actor_)
        self.critic_target_ = copy.deepcopy(self.critic_)


class DDPGPricer(ActorCriticPricer):
    """Monolithic-critic DDPG."""

    def _build_critic(self, rng):
        return MLPCritic(self.layout_.size, self.n_regions_, self.hidden, rng)


class HRAPricer(ActorCriticPricer):
    """Reward-decomposed critic without the localized module; one regression per region head."""

    def _build_critic(self, rng):
        return DecomposedCritic(
            self.grid_, self.layout_.window, self.gru_hidden, self.hidden[0], self.local_hidden, localized=False, rng=rng
        )

    def _critic_grads(self, s, a, r, r_region, s2, not_done, encoding=None):
        a2 = self.actor_target_.forward(s2)[0]
        _, q2_sub, _, _ = self.critic_target_.forward(s2, a2)
        y_sub = r_region + self.gamma * not_done[:, None] * q2_sub
        q, q_sub, _, cache = self.critic_.forward(s, a, encoding)
        B = s.shape[0]
        err_sub = q_sub - y_sub
        grads = self.critic_.backward_components(2.0 * err_sub / B, np.zeros_like(err_sub), cache)[0]
        # reported loss is the aggregate squared TD error, comparable across agents
        y = r + self.gamma * not_done * np.sum(q2_sub, axis=1)
        return float(np.mean((q - y) ** 2)), float(np.mean(q)), grads


class HRPPricer(ActorCriticPricer):
    """Decomposed GRU sub-critics plus the localized neighbor correction, trained on the total reward."""

    def _build_critic(self, rng):
        return DecomposedCritic(
            self.grid_, self.layout_.window, self.gru_hidden, self.hidden[0], self.local_hidden, localized=True, rng=rng
        )


AGENTS = {
    "ddpg": DDPGPricer,
    "hra": HRAPricer,
    "hrp": HRPPricer,
}
