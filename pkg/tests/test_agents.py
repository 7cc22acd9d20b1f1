import numpy as np
import pytest
from scipy import stats
from sklearn.base import clone

from gradcheck import sampled_rel_error
from rebalance.agents import (
    AGENT_CLASSES,
    DBPUCBPricer,
    DDPGPricer,
    HRAPricer,
    HRPPricer,
    OptFixPricer,
    PacedUCB,
    RandomPricer,
    ReplayBuffer,
    Transition,
    ZeroPricer,
    optfix_prices,
    run_episode,
)
from rebalance.agents.networks import DecomposedCritic, neighbor_states
from rebalance.core import ObservationLayout, RegionGrid
from rebalance.ingest import SyntheticDemandParams, synthesize_demand
from rebalance.nn import ParamBlock, soft_update
from rebalance.sim import BikeShareEnv, SimConfig

TINY = dict(hidden=(16, 16), gru_hidden=8, local_hidden=8, batch_size=16, warmup=64, n_episodes=2)


def small_env(rows=2, cols=2, budget=50.0, supply=25, volume=300, T=24) -> BikeShareEnv:
    grid = RegionGrid(rows, cols)
    demand = synthesize_demand(SyntheticDemandParams(n=grid.n, T=T, daily_volume=volume, seed=3,
                                                     peak_slots=(T // 3, 3 * T // 4)), grid)
    return BikeShareEnv(SimConfig(grid, demand, supply, budget, seed=0))


def observation_with_budget(env, rb):
    obs = env.reset(0)
    obs[env.layout.budget_index] = rb
    return obs


# -- Random ---------------------------------------------------------------

def test_random_pricer_zero_when_budget_gone():
    env = small_env()
    agent = RandomPricer(random_state=0).fit(env)
    assert np.all(agent.act(observation_with_budget(env, 0.0)) == 0.0)
    assert np.all(agent.act(observation_with_budget(env, 10.0)) > 0.0)


def test_random_pricer_is_reproducible():
    env = small_env()
    X = np.tile(env.reset(0), (5, 1))
    a = RandomPricer(random_state=4).fit(env).predict(X)
    b = RandomPricer(random_state=4).fit(env).predict(X)
    np.testing.assert_array_equal(a, b)


def test_random_pricer_mean_is_half_the_ceiling():
    env = small_env()
    X = np.tile(env.reset(0), (2500, 1))
    p = RandomPricer(random_state=1).fit(env).predict(X).ravel()
    assert p.size == 10_000
    sigma = 5.0 / np.sqrt(12.0) / np.sqrt(p.size)
    assert abs(p.mean() - 2.5) < 3 * sigma
    assert p.min() >= 0.0 and p.max() <= 5.0


# -- OPT-FIX --------------------------------------------------------------

def test_optfix_degenerate_costs_pick_that_cost():
    assert optfix_prices([[1.0] * 10], budget=1e6, demand=[1.0]).tolist() == [1.0]


def test_optfix_zero_budget_gives_zero_prices():
    assert optfix_prices([[1.0, 2.0], [0.5]], budget=0.0, demand=[1.0, 1.0]).tolist() == [0.0, 0.0]


def test_optfix_two_atoms_under_tight_budget():
    # two offers, budget 2: price 3 would spend 6, price 1 accepts half and spends 1
    assert optfix_prices([[1.0, 3.0]], budget=2.0, demand=[1.0]).tolist() == [1.0]
    assert optfix_prices([[1.0, 3.0]], budget=6.0, demand=[1.0]).tolist() == [3.0]


def test_optfix_pricer_outputs_a_constant_action():
    env = small_env(budget=100.0, supply=15)
    agent = OptFixPricer(calibration_seed=0).fit(env)
    obs = env.reset(0)
    first = agent.act(obs)
    res = run_episode(agent, env, 5, keep_actions=True)
    assert all(np.array_equal(a, first) for a in res.actions)
    with pytest.raises(ValueError):
        agent.calibrate([[], []], 10.0, [1, 1])


# -- DBP-UCB --------------------------------------------------------------

def test_ucb_tries_unpulled_arms_first():
    b = PacedUCB(np.linspace(0, 5, 11))
    for k in range(11):
        arm = b.select()
        assert b.counts[arm] == 0
        b.update(arm, 0.5)
    assert b.counts.tolist() == [1] * 11


def test_ucb_falls_back_to_free_arm_when_broke():
    b = PacedUCB(np.linspace(0, 5, 11))
    assert b.select(remaining_budget=0.4) == 0


def test_ucb_regret_is_sublinear():
    rng = np.random.default_rng(0)
    means = rng.uniform(0.1, 0.9, 11)
    b = PacedUCB(np.linspace(0, 5, 11))
    regret = np.zeros(10_000)
    total = 0.0
    for t in range(10_000):
        arm = b.select()
        b.update(arm, float(rng.random() < means[arm]))
        total += means.max() - means[arm]
        regret[t] = total
    assert regret[-1] / 10_000 <= 0.5 * regret[999] / 1_000


def test_dbpucb_stays_in_price_grid_and_budget():
    env = small_env(budget=30.0)
    agent = DBPUCBPricer(n_episodes=3, random_state=0).fit(env)
    res = run_episode(agent, env, 99, keep_actions=True)
    grid = np.linspace(0, 5, 11)
    assert all(np.isin(a, grid).all() for a in res.actions)
    assert res.log.spent <= 30.0 + 1e-9


# -- replay buffer --------------------------------------------------------

def test_replay_sampling_is_uniform():
    buf = ReplayBuffer(100, 3, 2, seed=0)
    for k in range(100):
        buf.add(Transition(np.full(3, k, dtype=float), np.zeros(2), 1.0, np.zeros(3)))
    idx = np.concatenate([buf.sample_indices(1000) for _ in range(100)])
    counts = np.bincount(idx, minlength=100)
    assert counts.sum() == 100_000
    assert stats.chisquare(counts).pvalue > 0.001


def test_replay_overwrites_oldest_first():
    buf = ReplayBuffer(3, 1, 1, seed=0)
    for k in range(5):
        buf.add(Transition(np.array([float(k)]), np.zeros(1), 0.0, np.zeros(1)))
    assert len(buf) == 3
    assert sorted(buf.s[:, 0].tolist()) == [2.0, 3.0, 4.0]


def test_transition_invariants():
    with pytest.raises(ValueError):
        Transition(np.zeros(2), np.zeros(1), -1.0, np.zeros(2))
    with pytest.raises(ValueError):
        Transition(np.array([np.nan, 0.0]), np.zeros(1), 1.0, np.zeros(2))


# -- networks -------------------------------------------------------------

def test_soft_update_drift_follows_geometric_decay():
    rng = np.random.default_rng(0)
    online = ParamBlock(w=rng.normal(size=(4, 3)), b=rng.normal(size=3))
    target = ParamBlock(w=rng.normal(size=(4, 3)), b=rng.normal(size=3))
    gap0 = {k: target[k] - online[k] for k in online}
    tau, k = 0.05, 40
    for _ in range(k):
        soft_update(target, online, tau)
    for name in online:
        np.testing.assert_allclose(target[name] - online[name], (1 - tau) ** k * gap0[name], rtol=1e-10, atol=1e-14)


def test_corner_region_sees_three_neighbors_padded_to_eight():
    grid = RegionGrid(3, 3)
    layout = ObservationLayout(9, 8)
    critic = DecomposedCritic(grid, 8, 4, 8, 4, rng=np.random.default_rng(0))
    s = np.random.default_rng(1).uniform(1, 2, size=(2, layout.size))
    ns = neighbor_states(layout, s, critic.nbr_index)[:, 0].reshape(2, 8, layout.region_width)
    assert np.all(ns[:, :3] != 0) and np.all(ns[:, 3:] == 0)
    np.testing.assert_array_equal(ns[:, 0], layout.regions(s)[:, 1])


def test_decomposed_critic_sums_its_parts():
    grid = RegionGrid(2, 3)
    rng = np.random.default_rng(2)
    critic = DecomposedCritic(grid, 4, 6, 8, 5, localized=True, rng=rng)
    s = rng.normal(size=(7, critic.layout.size))
    a = rng.uniform(size=(7, 6))
    q, sub, corr, _ = critic.forward(s, a)
    assert np.array_equal(q, np.sum(sub + corr, axis=1))
    critic.zero_localized()
    q0, sub0, corr0, _ = critic.forward(s, a)
    assert np.all(corr0 == 0.0)
    assert np.array_equal(q0, np.sum(sub0, axis=1))


def test_single_region_hra_critic_is_one_sub_critic():
    critic = DecomposedCritic(RegionGrid(1, 1), 8, 4, 8, localized=False, rng=np.random.default_rng(0))
    s = np.random.default_rng(1).normal(size=(3, critic.layout.size))
    q, sub, corr, _ = critic.forward(s, np.full((3, 1), 0.3))
    assert np.array_equal(q, sub[:, 0])
    assert not hasattr(critic, "local")


@pytest.mark.parametrize("cls", [DDPGPricer, HRAPricer, HRPPricer])
def test_actor_gradient_through_the_critic(cls):
    env = small_env(rows=2, cols=3)
    agent = cls(random_state=0, **TINY).initialize(env)
    rng = np.random.default_rng(5)
    s = rng.uniform(0, 1, size=(6, env.layout.size))
    grads = agent._actor_grads(s)

    def objective():
        a = agent.actor_.forward(s)[0]
        return -float(np.mean(agent.critic_.forward(s, a)[0]))

    assert sampled_rel_error(objective, agent.actor_.params, grads, rng, n_coords=40) < 1e-3


@pytest.mark.parametrize("cls", [DDPGPricer, HRPPricer])
def test_zero_discount_regresses_on_the_immediate_reward(cls):
    env = small_env()
    agent = cls(random_state=0, gamma=0.0, **TINY).initialize(env)
    agent.warm_up(env)
    s, a, r, r_region, s2, not_done = agent._batch(agent.buffer_.sample(16))
    loss, mean_q, _ = agent._critic_grads(s, a, r, r_region, s2, not_done)
    q = agent.critic_.forward(s, a)[0]
    assert loss == pytest.approx(float(np.mean((q - r) ** 2)), rel=1e-12)


def test_region_rewards_sum_to_the_total():
    env = small_env()
    agent = HRAPricer(random_state=0, **TINY).initialize(env)
    agent.warm_up(env)
    n = len(agent.buffer_)
    np.testing.assert_array_equal(agent.buffer_.r_region[:n].sum(axis=1), agent.buffer_.r[:n])


@pytest.mark.parametrize("name", ["ddpg", "hra", "hrp"])
def test_training_is_deterministic(name):
    env = small_env()
    a = AGENT_CLASSES[name](random_state=3, **TINY).fit(env)
    b = AGENT_CLASSES[name](random_state=3, **TINY).fit(env)
    assert a.loss_history_ == b.loss_history_
    X = np.tile(env.reset(1), (2, 1))
    np.testing.assert_array_equal(a.predict(X), b.predict(X))
    assert len(a.diagnostics_) == TINY["n_episodes"]


@pytest.mark.parametrize("name", sorted(AGENT_CLASSES))
def test_action_contract(name):
    env = small_env()
    kw = TINY if name in ("ddpg", "hra", "hrp") else {}
    if name == "dbpucb":
        kw = {"n_episodes": 1}
    agent = AGENT_CLASSES[name](**kw).fit(env)
    X = np.random.default_rng(0).uniform(0, 50, size=(8, env.layout.size))
    p = agent.predict(X)
    assert p.shape == (8, env.n)
    assert np.all((p >= 0.0) & (p <= 5.0))
    with pytest.raises(ValueError):
        agent.predict(X[:, :-1])


def test_estimator_api():
    agent = HRPPricer(tau=0.01, random_state=1)
    params = agent.get_params()
    assert params["tau"] == 0.01 and params["gru_hidden"] == 32
    twin = clone(agent)
    assert twin.get_params() == params and not hasattr(twin, "actor_")
    with pytest.raises(Exception):
        ZeroPricer().predict(np.zeros((1, 5)))


def test_checkpoint_round_trip(tmp_path):
    env = small_env()
    agent = HRPPricer(random_state=0, **TINY).fit(env)
    path = tmp_path / "hrp.rbnn"
    agent.save_checkpoint(path)
    other = HRPPricer(random_state=9, **TINY).initialize(env)
    other.load_checkpoint(path)
    X = np.tile(env.reset(2), (3, 1))
    np.testing.assert_array_equal(agent.predict(X), other.predict(X))
