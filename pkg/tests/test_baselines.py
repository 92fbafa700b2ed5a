import itertools

import cvxpy as cp
import numpy as np
import pytest

from amtm.baselines import (GroupAllocation, centralized_period, fair_share, present_flows,
                            semi_centralized_period, share_group, solve_num,
                            solve_num_with_backlog, theoretical_optimum)
from amtm.pricing import backlog_pressure
from amtm.topology import Link, Network, build_pathset
from conftest import make_flow


@pytest.fixture
def shared_link():
    return build_pathset(Network([0, 1], [Link(0, 1, 10.0)]), 1)


def test_kkt_two_flows(shared_link):
    flows = [make_flow(0, 0, 1, {0: 0.0}, w=3.0), make_flow(1, 0, 1, {0: 0.0}, w=1.0)]
    sol = solve_num(flows, shared_link)
    # x_j = (w_j / λ)^2 with x_1 + x_2 = 10 gives λ = 1, x = (9, 1), U = 6*3 + 2*1
    assert sol.flow_rate(0) == pytest.approx(9.0, abs=1e-3)
    assert sol.flow_rate(1) == pytest.approx(1.0, abs=1e-3)
    assert sol.prices[0] == pytest.approx(1.0, abs=1e-3)
    assert sol.utility == pytest.approx(20.0, abs=1e-3)
    assert sol.converged


def test_kkt_matches_brute_force_grid(shared_link):
    x1 = np.linspace(0, 10, 100001)
    grid = 6 * np.sqrt(x1) + 2 * np.sqrt(10 - x1)
    assert grid.max() == pytest.approx(20.0, abs=1e-6)
    assert x1[grid.argmax()] == pytest.approx(9.0, abs=1e-3)


def test_line_network_against_cvxpy_value(line3):
    # frozen from a conic solve of the same program
    flows = [make_flow(0, "a", "c", {1: 0.0}, w=1.0), make_flow(1, "a", "b", {0: 0.0}, w=2.0),
             make_flow(2, "b", "c", {2: 0.0}, w=1.0)]
    sol = solve_num(flows, line3, tol=1e-9)
    assert sol.utility == pytest.approx(18.48242127283799, rel=1e-8)
    np.testing.assert_allclose(sol.prices, [0.660331379609974, 0.4396496933113002], rtol=1e-5)
    np.testing.assert_allclose([sol.flow_rate(i) for i in range(3)],
                               [0.82647533, 9.17352467, 5.17352467], rtol=1e-5)


def test_multipath_against_cvxpy_value(diamond):
    st = diamond.candidates("s", "t")
    ut = diamond.candidates("u", "t")
    flows = [make_flow(0, "s", "t", {p: 0.0 for p in st}, w=1.0, cap=100.0),
             make_flow(1, "s", "t", {p: 0.0 for p in st}, w=2.0, cap=100.0),
             make_flow(2, "u", "t", {ut[0]: 0.0}, w=3.0, cap=100.0)]
    sol = solve_num(flows, diamond, tol=1e-9)
    assert sol.utility == pytest.approx(34.46559934583034, rel=1e-7)
    np.testing.assert_allclose([sol.flow_rate(i) for i in range(3)], [2.4, 9.6, 10.0], rtol=1e-4)
    np.testing.assert_allclose(sol.prices, [0, 0.948683293518789, 0.3227485734976316,
                                            0.3227485734976316, 0.6454971469955796], atol=1e-5)
    _assert_feasible(sol, diamond)


def _assert_feasible(sol, ps):
    load = np.zeros(ps.network.n_links)
    for routes in sol.rates.values():
        for p, x in routes.items():
            assert x >= -1e-12
            load[list(ps.paths[p].links)] += x
    assert np.all(load <= ps.network.capacity * (1 + 1e-9))


def _cvx_value(ps, flows):
    xs = [cp.Variable(len(f.routes), nonneg=True) for f in flows]
    U = sum(f.utility.weight / (1 - f.utility.alpha) * cp.power(cp.sum(x), 1 - f.utility.alpha)
            for f, x in zip(flows, xs))
    cons = [cp.sum(x) <= f.cap for f, x in zip(flows, xs)]
    for e in range(ps.network.n_links):
        terms = [x[i] for f, x in zip(flows, xs) for i, p in enumerate(sorted(f.routes))
                 if e in ps.paths[p].links]
        if terms:
            cons.append(sum(terms) <= ps.network.capacity[e])
    prob = cp.Problem(cp.Maximize(U), cons)
    prob.solve(solver=cp.CLARABEL)
    return prob.value


@pytest.mark.parametrize("seed", range(20))
def test_random_instances_against_cvxpy(seed):
    rng = np.random.default_rng(seed)
    from amtm.topology import generate_wan_topology, network_from_document
    net = network_from_document(generate_wan_topology(6, 8, capacity=20.0, seed=seed))
    ps = build_pathset(net, 3)
    pairs = ps.node_pairs()
    flows = []
    for j in range(12):
        s, d = pairs[rng.integers(len(pairs))]
        cand = ps.candidates(s, d)
        routes = cand if rng.uniform() < 0.5 else cand[:1]
        flows.append(make_flow(j, s, d, {p: 0.0 for p in routes}, w=float(rng.choice([1, 2, 3])),
                               cap=float(rng.choice([10, 20, 100]))))
    sol = solve_num(flows, ps)
    ref = _cvx_value(ps, flows)
    _assert_feasible(sol, ps)
    assert sol.utility <= ref * (1 + 1e-6)
    assert sol.utility == pytest.approx(ref, rel=1e-4)
    assert sol.dual >= ref * (1 - 1e-6)


def test_backlog_reduces_capacity(line3):
    flows = [make_flow(0, "a", "b", {0: 0.0}, w=1.0)]
    back = np.array([2.0, 0.0, 0.0, 0.0])
    sol = solve_num_with_backlog(flows, line3, back, n=2.0)
    # capacity 10 minus 2 * 2 Mbit of pressure
    assert sol.flow_rate(0) == pytest.approx(6.0, rel=1e-4)
    assert sol.prices[0] == pytest.approx(1 / np.sqrt(6.0), rel=1e-3)
    gone = solve_num_with_backlog(flows, line3, np.array([20.0, 0, 0, 0]), n=1.0)
    assert 0 in gone.saturated_links
    with pytest.raises(ValueError):
        solve_num_with_backlog(flows, line3, back, n=-1.0)


def test_solver_rejects_empty(line3):
    with pytest.raises(ValueError):
        solve_num([], line3)


def test_centralized_period_routes_and_messages(diamond):
    active = [make_flow(0, "s", "t", {2: 1.0}, w=1.0, cap=100.0)]
    arrived = [make_flow(1, "s", "t", {}, w=3.0, cap=10.0, sensitive=True),
               make_flow(2, "s", "t", {}, w=1.0, cap=100.0)]
    res = centralized_period(active, arrived, diamond)
    assert res.messages == 2 * 3
    # the delay-sensitive arrival sits on the lowest-delay route, the elastic one may split
    assert diamond.paths[next(iter(arrived[0].routes))].nodes == ("s", "u", "t")
    assert set(arrived[1].routes) == set(diamond.candidates("s", "t"))
    _assert_feasible(res.solution, diamond)


def test_semi_centralized_feasible(diamond):
    demand = {("s", "t"): {"ds": 30.0, "elastic": 50.0}, ("u", "t"): {"ds": 5.0, "elastic": 0.0}}
    alloc, messages = semi_centralized_period(demand, diamond)
    assert messages == 4
    load = np.zeros(diamond.network.n_links)
    for a in alloc.values():
        if a.ds_path is not None:
            load[list(diamond.paths[a.ds_path].links)] += a.ds_bandwidth
        for p, b in a.elastic.items():
            load[list(diamond.paths[p].links)] += b
    assert np.all(load <= diamond.network.capacity * (1 + 1e-9))


def test_fair_share():
    np.testing.assert_allclose(fair_share([1, 5, 10], 9), [1, 4, 4])
    np.testing.assert_allclose(fair_share([1, 2], 10), [1, 2])
    assert fair_share([3], 0).sum() == 0


def test_share_group_priority():
    alloc = GroupAllocation(ds_path=0, ds_bandwidth=12.0, elastic={1: 30.0, 2: 10.0})
    flows = [make_flow(0, 0, 1, {}, w=3.0, cap=10.0, sensitive=True),
             make_flow(1, 0, 1, {}, w=2.0, cap=20.0, sensitive=True),
             make_flow(2, 0, 1, {}, w=1.0, cap=100.0)]
    out = share_group(flows, alloc)
    assert out[0] == {0: 10.0} and out[1] == {0: 2.0}
    assert out[2] == pytest.approx({1: 30.0, 2: 10.0})


def test_present_flows_membership():
    flows = [make_flow(i, 0, 1, {}, arrival=a, duration=d)
             for i, (a, d) in enumerate([(0.0, 1.0), (0.5, 0.2), (1.0, 5.0), (2.0, 1.0)])]
    assert [f.id for f in present_flows(flows, 1.0, 1.01)] == [2]
    assert [f.id for f in present_flows(flows, 0.6, 0.61)] == [0, 1]


def test_theoretical_optimum_bounds_single_path(diamond):
    flows = [make_flow(i, "s", "t", {}, w=float(w), cap=100.0, arrival=0.0, duration=10.0)
             for i, w in enumerate([1, 2, 3])]
    opt = theoretical_optimum(flows, diamond, [1.0, 20.0], 0.01)
    assert opt[1].flows == 0 and opt[1].utility == 0.0
    for routes in itertools.product(diamond.candidates("s", "t"), repeat=3):
        pinned = [f.copy() for f in flows]
        for f, p in zip(pinned, routes):
            f.routes = {p: 0.0}
        assert solve_num(pinned, diamond).utility <= opt[0].bound * (1 + 1e-9)
