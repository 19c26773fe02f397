import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from firedispatch.erlang import CostTable, build_cost_table
from firedispatch.experiment import make_instance
from firedispatch.graph import Instance
from firedispatch.mdp import (Model, Policy, SolverError, StateSpace, action_set,
                              closest_first_policy, evaluate_policy, flar, pair_to_vector,
                              policy_iteration, write_evaluation_csv, write_policy_csv)
from firedispatch.sim import simulate

from oracles import all_policy_costs, feasible_dispatches, stationary_cost, vector_to_pair


def _as_vectors(pairs, n):
    return sorted(tuple(pair_to_vector(p, n)[0].tolist()) for p in pairs)


def test_action_set_small_cases():
    assert action_set([0, 0, 0]) == [(0, 0)]
    assert action_set([0, 1, 0]) == [(0, 2)]
    assert len(action_set([1] * 5)) == 10


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=5))
def test_action_set_matches_enumeration(f):
    assert _as_vectors(action_set(f), len(f)) == sorted(feasible_dispatches(f))
    for pair in action_set(f):
        a, outside = pair_to_vector(pair, len(f))
        assert a.sum() + outside == 2


def test_state_space_indexing():
    space = StateSpace([1, 2, 1])
    assert space.size == 12
    assert len({tuple(f) for f in space.states}) == 12
    for s, f in enumerate(space.states):
        assert space.index(f) == s
    assert space.states[space.reference].tolist() == [1, 2, 1]
    for I in range(1, 9):
        assert StateSpace([1] * I).size == 2 ** I


def _table(inst, value):
    n = inst.station_count + 1
    return CostTable(np.full((inst.node_count, n, n), float(value)), False)


def test_constant_costs(small_instance):
    inst = small_instance(seed=3, d=4, I=4)
    pol = closest_first_policy(inst)
    zero = evaluate_policy(inst, _table(inst, 0.0), pol)
    assert zero.g == 0.0 and np.all(zero.h == 0.0)
    one = evaluate_policy(inst, _table(inst, 1.0), pol)
    assert one.g == pytest.approx(inst.total_rate, rel=1e-12)
    assert one.flar == pytest.approx(1.0, rel=1e-12)
    assert np.allclose(one.h, 0.0, atol=1e-12)


def test_flar_definition(small_instance):
    inst = small_instance()
    ev = evaluate_policy(inst, build_cost_table(inst), closest_first_policy(inst))
    assert flar(ev, inst) == ev.g / sum(inst.lambdas)
    ev.g = 0.0
    assert flar(ev) == 0.0
    ev.g = inst.total_rate
    assert flar(ev) == 1.0
    ev.total_rate = 0.0
    with pytest.raises(ValueError):
        flar(ev)


def test_uniformization_rate(small_instance):
    inst = small_instance(seed=1, d=4, I=3)
    ev = evaluate_policy(inst, build_cost_table(inst), closest_first_policy(inst))
    assert ev.tau == pytest.approx(sum(inst.lambdas) + inst.mu * 3)


def _bellman_residual(inst, costs, pol, ev):
    """Plug (g, h) back into the fixed-policy equations, written out state by state."""
    space = StateSpace(inst.capacities)
    worst = 0.0
    for s, f in enumerate(space.states):
        rhs = -ev.g
        for k, cap in enumerate(inst.capacities):
            up = f.copy()
            if f[k] < cap:
                up[k] += 1
                rhs += inst.mu * (cap - f[k]) * ev.h[space.index(up)]
            rhs += inst.mu * f[k] * ev.h[s]
        for j, lam in enumerate(inst.lambdas):
            pair = pol.pair(s, j)
            a, _ = pair_to_vector(pair, inst.station_count)
            rhs += lam * (costs[j, pair[0], pair[1]] + ev.h[space.index(f - a)])
        worst = max(worst, abs(ev.tau * ev.h[s] - rhs))
    return worst


@pytest.mark.parametrize("seed", range(4))
def test_evaluation_solves_bellman_equations(seed):
    inst = make_instance(4, 4, 0.3, 0.6, bool(seed % 2), seed)
    costs = build_cost_table(inst)
    pol = closest_first_policy(inst)
    ev = evaluate_policy(inst, costs, pol)
    assert ev.h[StateSpace(inst.capacities).reference] == 0.0
    assert _bellman_residual(inst, costs, pol, ev) <= 1e-10 * ev.tau
    assert ev.residual <= 1e-9 * ev.tau


@pytest.mark.parametrize("seed", range(5))
def test_evaluation_matches_stationary_law(seed):
    inst = make_instance(3, 3, 0.4, 0.6, False, seed)
    costs = build_cost_table(inst)
    model = Model(inst)
    rng = np.random.default_rng(seed)
    pairs, _, valid = model.candidates
    # random feasible policy
    pick = np.array([[rng.choice(np.flatnonzero(valid[s])) for _ in range(inst.node_count)]
                     for s in range(model.space.size)])
    actions = pairs[np.arange(model.space.size)[:, None], pick]
    pol = Policy("custom", actions)
    model.check_policy(pol)
    ev = evaluate_policy(inst, costs, pol, model)
    space = model.space

    def choice(f, j):
        return pair_to_vector(pol.pair(space.index(f), j), 3)[0].tolist()

    def cost_of(f, j):
        p = pol.pair(space.index(f), j)
        return costs[j, p[0], p[1]]

    assert ev.g == pytest.approx(stationary_cost(inst.capacities, inst.lambdas, inst.mu, cost_of, choice),
                                 rel=1e-10)


def test_multi_truck_evaluation_matches_stationary_law():
    base = make_instance(3, 2, 0.1, 0.6, True, 6)
    inst = Instance(base.graph, base.stations, tuple(x * 2 for x in base.lambdas), 1.0, base.gamma,
                    base.t_star, base.rho, True, base.outside_phases, base.seed, (2, 2))
    inst.validate()
    costs = build_cost_table(inst)
    pol, ev = policy_iteration(inst, costs)
    space = StateSpace(inst.capacities)
    g = stationary_cost(
        inst.capacities, inst.lambdas, inst.mu,
        lambda f, j: costs[(j, *pol.pair(space.index(f), j))],
        lambda f, j: pair_to_vector(pol.pair(space.index(f), j), 2)[0].tolist())
    assert ev.g == pytest.approx(g, rel=1e-10)
    assert pol.actions.shape == (9, 9, 2)


def test_closest_first_edge_states(small_instance):
    inst = small_instance(seed=5, d=4, I=4)
    pol = closest_first_policy(inst)
    space = StateSpace(inst.capacities)
    full, empty = space.reference, space.index([0] * 4)
    for j in range(inst.node_count):
        two = sorted(range(4), key=lambda k: (inst.phases[k, j], k))[:2]
        assert pol.pair(full, j) == tuple(sorted(k + 1 for k in two))
        assert pol.pair(empty, j) == (0, 0)


@pytest.mark.parametrize("seed", range(5))
def test_closest_first_matches_rank_scan(seed):
    inst = make_instance(5, 5, 0.1, 0.6, False, seed)
    pol = closest_first_policy(inst)
    space = StateSpace(inst.capacities)
    rng = np.random.default_rng(seed)
    for s in rng.choice(space.size, 12, replace=False):
        f = space.states[s]
        for j in range(inst.node_count):
            idle = [k for k in range(5) if f[k]]
            best = []
            for _ in range(min(2, len(idle))):
                k = min((k for k in idle if k not in best), key=lambda k: (inst.phases[k, j], k))
                best.append(k)
            expected = vector_to_pair([int(k in best) for k in range(5)])
            assert pol.pair(s, j) == expected


@pytest.mark.parametrize("seed", range(5))
def test_policy_iteration_against_enumeration(seed):
    inst = make_instance(3, 3, 0.2, 0.6, bool(seed % 2), 100 + seed)
    costs = build_cost_table(inst)
    g_all, _, _ = all_policy_costs(inst.capacities, inst.lambdas, inst.mu, costs.values)
    _, ev = policy_iteration(inst, costs)
    assert ev.g == pytest.approx(g_all.min(), rel=1e-10)


def test_policy_iteration_fixed_point_and_monotone(small_instance):
    inst = small_instance(seed=2, d=5, I=5, rho=0.3)
    costs = build_cost_table(inst)
    opt, ev = policy_iteration(inst, costs)
    hist = opt.meta["g_history"]
    assert opt.meta["initial"] == "CF"
    assert all(b <= a + 1e-14 for a, b in zip(hist, hist[1:]))
    again, ev2 = policy_iteration(inst, costs, opt)
    assert again.same_actions(opt)
    assert len(again.meta["g_history"]) == 1
    assert ev2.g == ev.g
    cf = evaluate_policy(inst, costs, closest_first_policy(inst))
    assert ev.g <= cf.g + 1e-12


def test_policy_iteration_cap(small_instance):
    inst = small_instance(seed=2, d=5, I=5, rho=0.3)
    costs = build_cost_table(inst)
    opt, _ = policy_iteration(inst, costs)
    if len(opt.meta["g_history"]) > 1:
        with pytest.raises(SolverError):
            policy_iteration(inst, costs, max_iterations=1)


def test_infeasible_policy_rejected(small_instance):
    inst = small_instance()
    model = Model(inst)
    pol = closest_first_policy(inst, model)
    bad = pol.actions.copy()
    bad[model.space.index([0, 0, 0]), 0] = (1, 2)
    with pytest.raises(ValueError, match="infeasible"):
        model.check_policy(Policy("custom", bad))


def test_iterative_solver_agrees_with_dense(monkeypatch):
    import firedispatch.mdp as mdp
    inst = make_instance(5, 6, 0.3, 0.6, False, 4)
    costs = build_cost_table(inst)
    pol = closest_first_policy(inst)
    dense = evaluate_policy(inst, costs, pol)
    monkeypatch.setattr(mdp, "DENSE_LIMIT", 1)
    sparse = evaluate_policy(inst, costs, pol)
    assert sparse.g == pytest.approx(dense.g, rel=1e-9)
    assert np.allclose(sparse.h, dense.h, atol=1e-9)


def test_large_state_space_uses_iterative_path():
    inst = make_instance(6, 13, 0.1, 0.6, False, 1)
    costs = build_cost_table(inst)
    ev = evaluate_policy(inst, costs, closest_first_policy(inst))
    assert len(ev.h) == 2 ** 13
    assert 0 < ev.flar < 1


def test_evaluation_matches_simulation():
    inst = make_instance(3, 2, 0.1, 0.6, False, 21)
    costs = build_cost_table(inst)
    pol = closest_first_policy(inst)
    ev = evaluate_policy(inst, costs, pol)
    res = simulate(inst, pol, 1_000_000, seed=5)
    sigma = res.ci_halfwidth / 1.959963984540054
    assert abs(res.flar_hat - ev.flar) <= 3 * sigma


def test_policy_and_evaluation_csv(tmp_path, small_instance):
    inst = small_instance(seed=1)
    costs = build_cost_table(inst)
    pol, ev = policy_iteration(inst, costs)
    write_policy_csv(inst, pol, tmp_path / "p.csv")
    write_evaluation_csv(ev, tmp_path / "e.csv")
    with open(tmp_path / "p.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["state_index", "j", "a_1", "a_2", "a_3", "outside_count"]
    assert len(rows) == 1 + 8 * 9
    for r in rows[1:]:
        a = list(map(int, r[2:5]))
        assert sum(a) + int(r[5]) == 2
    with open(tmp_path / "e.csv") as fh:
        head, vals = list(csv.reader(fh))
    assert head == ["g", "flar", "tau", "iteration_count"]
    assert float(vals[0]) == pytest.approx(ev.g, rel=1e-11)
