import numpy as np
import pytest

from amtm.link_dynamics import StateReport, propagate_shallow
from amtm.pricing import (DEEP, PriceUpdateConfig, adapt_n, backlog_pressure, dual_value,
                          fdtc_allocate, link_load, mean_queue_time, mismatch, nipu_deep,
                          nipu_flow_based, nipu_shallow, path_queue_times, path_rates,
                          select_path)
from conftest import identity_instance, make_flow


def test_config_validation():
    for bad in ({"mu": 0}, {"n": -1}, {"epsilon": 0}, {"w_star": 0}, {"regime": "x"},
                {"interval": 0}, {"queue_time_scope": "some"}):
        with pytest.raises(ValueError):
            PriceUpdateConfig(**bad)


def test_select_path_rules(diamond):
    ps = diamond
    cand = ps.candidates("s", "t")
    prices = np.zeros(ps.network.n_links)
    delays = ps.network.delay
    ds = make_flow(0, "s", "t", {}, sensitive=True)
    el = make_flow(1, "s", "t", {})
    # path delays: direct 5, via u 2, via v 4
    assert ps.paths[select_path(ds, ps, prices, delays)].nodes == ("s", "u", "t")
    # all prices zero: tie goes to the lowest id
    assert select_path(el, ps, prices, delays) == min(cand)
    prices = np.array([1.0, 1.0, 0.2, 0.2, 0.5])
    assert ps.paths[select_path(el, ps, prices, delays)].nodes == ("s", "v", "t")
    # queueing on the fast route pushes delay-sensitive traffic away
    queue = np.array([0.01, 0.0, 0.0, 0.0, 0.0])
    assert ps.paths[select_path(ds, ps, prices, delays, queue)].nodes == ("s", "v", "t")


def test_fdtc_allocation(diamond):
    ps = diamond
    prices = np.array([1.0, 1.0, 0.2, 0.2, 0.5])
    f = make_flow(0, "s", "t", {}, w=2.0, cap=50.0)
    a = fdtc_allocate(f, ps, prices, ps.network.delay)
    assert a.status == "admitted"
    assert a.rate == pytest.approx((2.0 / 0.4) ** 2)
    assert f.routes == {a.path: a.rate}
    assert a.theta(ps.n_paths).sum() == 1
    g = make_flow(1, "u", "s", {})
    r = fdtc_allocate(g, ps, prices, ps.network.delay)
    assert r.status == "rejected" and g.routes == {}


def test_shallow_update_equals_flow_based_update():
    rng = np.random.default_rng(5)
    for _ in range(100):
        ps, flows = identity_instance(rng)
        st = propagate_shallow(ps, path_rates(flows, ps.n_paths))
        prices = rng.uniform(0, 1, ps.network.n_links)
        a = nipu_shallow(prices, st.report(), ps, 0.01)
        b = nipu_flow_based(prices, flows, ps, 0.01)
        np.testing.assert_allclose(a, b, atol=1e-9, rtol=0)


def test_mismatch_is_load_minus_capacity(line3):
    ps = line3
    flows = [make_flow(0, "a", "c", {1: 12.0}), make_flow(1, "b", "c", {2: 3.0})]
    st = propagate_shallow(ps, path_rates(flows, ps.n_paths))
    np.testing.assert_allclose(mismatch(st.report(), ps), link_load(flows, ps) - ps.network.capacity)


def test_backlog_pressure_by_hand(line3):
    ps = line3
    # hops: (a->b), (a->c via a->b), (a->c via b->c), (b->c)
    b = np.array([1.0, 2.0, 4.0, 8.0])
    np.testing.assert_allclose(backlog_pressure(b, ps), [1 + 2, (2 + 4) + 8])


def test_path_queue_times(line3):
    ps = line3
    b = np.array([1.0, 2.0, 4.0, 8.0])
    link_wait = np.array([3.0 / 10.0, 12.0 / 6.0])
    np.testing.assert_allclose(path_queue_times(b, ps),
                               [link_wait[0], link_wait.sum(), link_wait[1]])


def test_mean_queue_time_scopes(line3):
    ps = line3
    b = np.array([0.0, 0.0, 0.0, 6.0])
    rep = StateReport(np.array([0.0, 0.0, 1.0]), np.zeros(4), b, np.zeros(2))
    assert mean_queue_time(rep, ps, "all") == pytest.approx((0 + 1 + 1) / 3)
    assert mean_queue_time(rep, ps, "active") == pytest.approx(1.0)


def test_nipu_deep_step(line3):
    ps = line3
    cfg = PriceUpdateConfig(mu=0.1, n=0.01, adaptive=False)
    b = np.array([1.0, 2.0, 4.0, 8.0])
    rep = StateReport(np.array([5.0, 5.0, 5.0]), np.array([5.0, 5.0, 5.0, 5.0]), b, np.zeros(2))
    prices = np.array([0.5, 0.5])
    upd = nipu_deep(prices, rep, ps, cfg)
    expect = prices + 0.01 * backlog_pressure(b, ps) + 0.1 * mismatch(rep, ps)
    np.testing.assert_allclose(upd.prices, np.maximum(expect, 0))
    assert upd.n == 0.01


def test_adaptive_gain():
    cfg = PriceUpdateConfig(epsilon=1e-5, w_star=0.2)
    assert adapt_n(1e-4, 0.3, cfg) == pytest.approx(1.1e-4)
    assert adapt_n(1e-4, 0.1, cfg) == pytest.approx(0.9e-4)
    assert adapt_n(0.0, 0.1, cfg) == 0.0


def test_updates_stay_nonnegative(line3):
    ps = line3
    rep = StateReport(np.zeros(3), np.zeros(4), np.zeros(4), ps.network.capacity.copy())
    cfg = PriceUpdateConfig(mu=1.0, regime=DEEP)
    assert np.all(nipu_deep(np.array([0.1, 0.0]), rep, ps, cfg).prices == 0)
    assert np.all(nipu_shallow(np.array([0.1, 0.0]), rep, ps, 1.0) == 0)


def test_dual_value_on_shared_link():
    from amtm.topology import Link, Network, build_pathset
    ps = build_pathset(Network([0, 1], [Link(0, 1, 10.0)]), 1)
    flows = [make_flow(0, 0, 1, {0: 0.0}, w=3.0), make_flow(1, 0, 1, {0: 0.0}, w=1.0)]
    assert dual_value(np.array([1.0]), flows, ps) == pytest.approx(20.0)
    rng = np.random.default_rng(1)
    for _ in range(50):
        lam = rng.uniform(0.01, 5, 1)
        x = rng.dirichlet([1, 1]) * 10 * rng.uniform()
        primal = sum(f.utility.value(v) for f, v in zip(flows, x))
        assert dual_value(lam, flows, ps) >= primal - 1e-12
    with pytest.raises(ValueError):
        dual_value(np.array([-1.0]), flows, ps)
