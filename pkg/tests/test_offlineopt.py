import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rebalance.core import RegionGrid
from rebalance.offlineopt import (
    IlpInstance,
    check_assignment,
    neighbor_mask,
    sample_costs,
    solve_ilp,
    solve_lp,
    v_horizon_optimize,
)

from ilp_oracle import brute_force, random_tiny_instance


# -- worked examples ---------------------------------------------------------

def one_region(d, s, budget):
    return IlpInstance(np.array([[[d]]]), np.array([s]), np.zeros((1, 1, 1)), np.ones((1, 1), bool), budget)


def test_zero_demand_has_zero_objective():
    inst = IlpInstance(np.zeros((2, 2, 2)), np.array([3, 1]), np.zeros((2, 2, 2)), np.ones((2, 2), bool), 5.0)
    assert solve_ilp(inst).objective == 0


def test_single_region_local_pickups_are_free():
    sol = solve_ilp(one_region(5, 3, 0.0))
    assert sol.objective == 3
    assert sol.exact
    assert sol.spent == 0.0


@pytest.mark.parametrize("budget, expect", [(1.0, 1), (2.0, 2)])
def test_two_regions_budget_limits_neighbor_pickups(budget, expect):
    demand = np.zeros((1, 2, 2), dtype=np.int64)
    demand[0, 0, 1] = 2  # two users leave region 0, which has no bikes
    costs = np.zeros((1, 2, 2))
    costs[0, 0, 1] = costs[0, 1, 0] = 1.0
    inst = IlpInstance(demand, np.array([0, 2]), costs, np.ones((2, 2), bool), budget)
    sol = solve_ilp(inst)
    assert sol.objective == expect
    assert sol.assignment == {(0, 0, 1, 1): expect}


def test_same_slot_returns_feed_the_next_slot():
    # one bike; slot 0 rides 0 -> 1, slot 1 rides it back
    demand = np.zeros((2, 2, 2), dtype=np.int64)
    demand[0, 0, 1] = 1
    demand[1, 1, 0] = 1
    inst = IlpInstance(demand, np.array([1, 0]), np.zeros((2, 2, 2)), np.eye(2, dtype=bool), 0.0)
    sol = solve_ilp(inst)
    assert sol.objective == 2
    np.testing.assert_array_equal(sol.end_supply, [1, 0])


# -- brute-force equivalence -------------------------------------------------

def test_branch_and_bound_matches_enumeration():
    rng = np.random.default_rng(2024)
    for _ in range(25):
        inst = random_tiny_instance(rng)
        sol = solve_ilp(inst)
        assert sol.exact
        assert sol.objective == brute_force(inst)
        assert sol.lp_bound >= sol.objective - 1e-9
        check_assignment(inst, sol.assignment)


@pytest.mark.parametrize("seed", range(6))
def test_warm_started_nodes_reach_the_cold_optimum(seed):
    inst = grid_instance(100 + seed, T=4)
    warm = solve_ilp(inst)
    cold = solve_ilp(inst, warm_start=False)
    assert warm.objective == cold.objective
    assert warm.exact and cold.exact
    check_assignment(inst, warm.assignment)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=20, deadline=None)
def test_returned_plans_are_feasible_and_within_budget(seed):
    inst = random_tiny_instance(np.random.default_rng(seed), max_vars=30)
    sol = solve_ilp(inst)
    check_assignment(inst, sol.assignment)
    assert sol.spent <= inst.budget + 1e-6
    assert sum(sol.assignment.values()) == sol.objective


def test_node_cap_downgrades_to_bounds():
    rng = np.random.default_rng(7)
    # find an instance whose root relaxation is fractional
    for _ in range(200):
        inst = random_tiny_instance(rng, max_vars=30)
        full = solve_ilp(inst)
        if full.nodes > 1:
            break
    else:
        pytest.skip("no fractional root found")
    capped = solve_ilp(inst, node_cap=1)
    assert not capped.exact
    assert capped.objective <= full.objective <= capped.lp_bound + 1e-9
    check_assignment(inst, capped.assignment)


# -- simplex on LPs with a known optimum ------------------------------------

def constructed_lp(rng, m, n):
    """Build max c@x, Ax<=b, x>=0 whose optimum is certified by a complementary primal/dual pair."""
    A = rng.normal(size=(m, n))
    x = np.zeros(n)
    y = np.zeros(m)
    support = rng.choice(n, size=min(m, n) // 2 + 1, replace=False)
    x[support] = rng.uniform(0.5, 2.0, size=len(support))
    tight = rng.choice(m, size=len(support), replace=False)
    y[tight] = rng.uniform(0.5, 2.0, size=len(tight))
    slack = rng.uniform(0.5, 2.0, size=m)
    slack[tight] = 0.0
    b = A @ x + slack
    reduced = rng.uniform(0.5, 2.0, size=n)
    reduced[support] = 0.0
    c = A.T @ y - reduced  # dual feasible: A^T y - c = reduced >= 0
    return c, A, b, float(c @ x)


@pytest.mark.parametrize("seed", range(20))
def test_simplex_matches_certified_optimum(seed):
    rng = np.random.default_rng(seed)
    m, n = int(rng.integers(2, 12)), int(rng.integers(2, 12))
    c, A, b, opt = constructed_lp(rng, m, n)
    res = solve_lp(c, A, b)
    assert res.status == "optimal"
    assert res.objective == pytest.approx(opt, abs=1e-8)
    assert np.all(A @ res.x <= b + 1e-8)


def test_simplex_handles_bounds_equalities_and_infeasibility():
    # max x + y, x + y = 3, 1 <= x <= 2, 0 <= y <= 1.5
    res = solve_lp([1, 1], [[1, 1]], [3], lower=[1, 0], upper=[2, 1.5], eq=[True])
    assert res.status == "optimal" and res.objective == pytest.approx(3.0)
    assert 1.5 - 1e-9 <= res.x[0] <= 2 + 1e-9
    res = solve_lp([1.0], [[1.0]], [1.0], lower=[2.0])
    assert res.status == "infeasible"
    res = solve_lp([1.0, 0.0], [[0.0, 1.0]], [1.0])
    assert res.status == "unbounded"


def test_simplex_survives_degenerate_cycling_example():
    # Beale's classic cycling LP (max form); optimum 1/20
    c = np.array([0.75, -150.0, 0.02, -6.0])
    A = np.array([[0.25, -60.0, -0.04, 9.0], [0.5, -90.0, -0.02, 3.0], [0.0, 0.0, 1.0, 0.0]])
    b = np.array([0.0, 0.0, 1.0])
    res = solve_lp(c, A, b)
    assert res.status == "optimal"
    assert res.objective == pytest.approx(0.05, abs=1e-10)


# -- costs and horizons ------------------------------------------------------

def test_sample_costs_rules():
    allowed = np.ones((2, 2), dtype=bool)
    c = sample_costs({(0, 1, 0): [2.0], (1, 0, 0): [1.0, 3.0]}, allowed, T=2, seed=0)
    assert c[0, 0, 1] == 2.0 and c[1, 0, 1] == 2.0  # slot 1 falls back to the pooled samples
    assert c[0, 0, 0] == 0.0 and c[1, 1, 1] == 0.0
    assert c[0, 1, 0] in (1.0, 3.0)
    again = sample_costs({(0, 1, 0): [2.0], (1, 0, 0): [1.0, 3.0]}, allowed, T=2, seed=0)
    np.testing.assert_array_equal(c, again)
    with pytest.raises(ValueError):
        sample_costs({(0, 1, 0): [2.0]}, allowed, T=1)


def test_instance_validation_and_json_round_trip(tmp_path):
    inst = random_tiny_instance(np.random.default_rng(3))
    path = tmp_path / "inst.json"
    inst.dump(path)
    back = IlpInstance.load(path)
    np.testing.assert_array_equal(back.demand, inst.demand)
    assert solve_ilp(back).objective == solve_ilp(inst).objective
    bad = inst.costs.copy()
    bad[0, 0, 0] = 1.0
    with pytest.raises(ValueError):
        IlpInstance(inst.demand, inst.supply, bad, inst.allowed, inst.budget)


def grid_instance(seed, T=6, rows=2, cols=2):
    rng = np.random.default_rng(seed)
    grid = RegionGrid(rows, cols)
    n = grid.n
    allowed = neighbor_mask(grid)
    demand = rng.poisson(1.2, size=(T, n, n))
    costs = np.where(allowed, rng.uniform(0.2, 4.0, size=(T, n, n)), 0.0)
    for t in range(T):
        np.fill_diagonal(costs[t], 0.0)
    return IlpInstance(demand, rng.integers(0, 4, size=n), costs, allowed, 6.0)


@pytest.mark.parametrize("seed", range(4))
def test_longer_horizons_never_serve_fewer(seed):
    inst = grid_instance(seed)
    full = solve_ilp(inst).objective
    v1 = v_horizon_optimize(inst, 1).served
    v3 = v_horizon_optimize(inst, 3).served
    v_all = v_horizon_optimize(inst, inst.T)
    assert v_all.served == full and len(v_all.windows) == 1
    assert v1 <= full and v3 <= full


def test_horizon_truncates_last_window():
    inst = grid_instance(9, T=5)
    res = v_horizon_optimize(inst, 2)
    assert [w.end_supply is not None for w in res.windows] == [True] * 3
    assert res.exact
