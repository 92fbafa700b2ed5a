import math
from dataclasses import replace

import numpy as np
import pytest

from amtm import metrics
from amtm.engine import (ConfigError, SimConfig, Simulation, generate_trace, replay_flow_trace,
                         resolve_pathset, run, with_scheme)
from amtm.pricing import PriceUpdateConfig
from amtm.topology import Link, Network, build_pathset
from conftest import make_flow


@pytest.fixture
def single_link():
    return build_pathset(Network([0, 1], [Link(0, 1, 10.0, 1.0)]), 1)


def fast_pricing(**kw):
    return PriceUpdateConfig(**{"mu": 0.02, "n": 0.0, "adaptive": False, **kw})


@pytest.mark.parametrize("bad", [
    {"scheme": "x"}, {"duration": 0}, {"warmup": -1}, {"tick": 0}, {"tick": 0.2},
    {"te_period": 0.05}, {"warmup": 0.015}, {"price_delay": -1}, {"buffer_mbit": 0},
    {"stationary_flows": -1}, {"intensity": -1},
])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        SimConfig(**bad)


def test_trace_is_sorted_and_preloaded(wan):
    cfg = SimConfig(intensity=20, duration=5, preload=True, seed=3)
    tr = generate_trace(cfg, wan)
    arr = [f.arrival for f in tr]
    assert arr == sorted(arr)
    assert arr[0] < 0 and max(arr) < 5
    assert len({f.id for f in tr}) == len(tr)


def test_stationary_flows_reach_kkt_point(single_link):
    trace = [make_flow(0, 0, 1, {}, w=3.0, cap=50.0), make_flow(1, 0, 1, {}, w=1.0, cap=50.0)]
    cfg = SimConfig(topology=single_link, intensity=0, duration=40, priority=False,
                    pricing=fast_pricing(), price_delay=0)
    sim = Simulation(cfg, trace)
    rep = sim.run()
    assert rep.prices[-1][0] == pytest.approx(1.0, rel=1e-3)
    rates = sorted(f.rate for f in sim.active_flows())
    assert rates == pytest.approx([1.0, 9.0], rel=2e-3)
    assert rep.utility[-1] == pytest.approx(20.0, rel=1e-4)


def test_stale_prices_still_converge(single_link):
    trace = [make_flow(0, 0, 1, {}, w=3.0, cap=50.0), make_flow(1, 0, 1, {}, w=1.0, cap=50.0)]
    cfg = SimConfig(topology=single_link, intensity=0, duration=60, priority=False,
                    pricing=fast_pricing(n=1e-2), price_delay=1)
    rep = run_trace(cfg, trace)
    assert rep.prices[-1][0] == pytest.approx(1.0, rel=1e-3)
    assert rep.link_backlog[-1][0] < 1e-3
    # without the backlog term the price settles but the start-up queue never drains
    rep = run_trace(replace(cfg, pricing=fast_pricing(n=0.0)), [f.copy() for f in trace])
    assert rep.prices[-1][0] == pytest.approx(1.0, rel=1e-3)
    assert rep.link_backlog[-1][0] > 1.0


def run_trace(cfg, trace):
    return replay_flow_trace(cfg, trace)


def test_flow_lifetimes_and_records(single_link):
    trace = [make_flow(0, 0, 1, {}, w=1.0, cap=2.0, arrival=0.505, duration=1.0)]
    cfg = SimConfig(topology=single_link, intensity=0, duration=3, pricing=fast_pricing())
    rep = replay_flow_trace(cfg, trace)
    k = np.flatnonzero(rep.active_flows)
    # admitted in the tick containing 0.505 and retired at the first tick start >= 1.505
    assert rep.tick_times[k[0]] == pytest.approx(0.50)
    assert rep.tick_times[k[-1]] == pytest.approx(1.50)
    rec = rep.flows[0]
    assert rec["admitted"] == pytest.approx(0.505) and rec["end"] == pytest.approx(1.51)
    assert rec["mean_rate"] == pytest.approx(2.0)


def test_centralized_admits_at_period_boundary(single_link):
    trace = [make_flow(i, 0, 1, {}, w=1.0, cap=2.0, arrival=a, duration=2.0)
             for i, a in enumerate([0.3, 1.2, 1.9])]
    cfg = SimConfig(topology=single_link, intensity=0, duration=6, te_period=1.0,
                    scheme="centralized")
    rep = replay_flow_trace(cfg, trace)
    wait = rep.flows["admitted"] - rep.flows["arrival"]
    np.testing.assert_allclose(np.sort(wait), np.sort([0.7, 0.8, 0.1]))
    # lifetimes shift with the service start
    np.testing.assert_allclose(rep.flows["end"] - rep.flows["admitted"], 2.0, atol=0.011)
    assert list(rep.round_messages[:3]) == [0, 2, 6]


def test_engine_is_deterministic(wan):
    cfg = SimConfig(intensity=10, duration=3, preload=True, seed=9)
    a, b = run(cfg, wan), run(cfg, wan)
    assert a.equals(b)
    c = run(replace(cfg, seed=10), wan)
    assert not a.equals(c)


def test_schemes_share_the_trace(wan):
    cfg = SimConfig(intensity=10, duration=4, preload=True, seed=2, te_period=2.0, warmup=2.0)
    tr = generate_trace(cfg, wan)
    for s in metrics.SCHEMES:
        rep = replay_flow_trace(with_scheme(cfg, s), tr, wan)
        assert set(rep.flows["id"]) <= {f.id for f in tr}
        assert np.all(rep.utility >= 0)
        assert rep.overflow_mbit == 0.0


def test_utility_double_entry(wan):
    cfg = SimConfig(intensity=15, duration=2, preload=True, seed=4, sample_interval=0.5)
    seen = []

    def observe(sim):
        seen.append((sim.state.clock, metrics.network_utility(sim.active_flows())))

    rep = run(cfg, wan, observer=observe)
    assert len(seen) == 4
    for t, u in seen:
        k = int(round(t / cfg.tick)) - 1
        assert rep.utility[k] == pytest.approx(u, rel=1e-9)
    assert rep.period_utility.sum() == pytest.approx(rep.utility.sum() * cfg.tick, rel=1e-12)


def test_amtm_messages_per_round(wan):
    rep = run(SimConfig(intensity=10, duration=1, seed=1), wan)
    assert np.all(rep.round_messages == 135)
    assert len(rep.round_messages) == 9  # rounds at 0.1 .. 0.9 s


def test_resolve_pathset_cache():
    assert resolve_pathset(SimConfig()) is resolve_pathset(SimConfig(seed=4))


def test_trace_must_be_sorted(single_link):
    cfg = SimConfig(topology=single_link, intensity=0, duration=1)
    trace = [make_flow(0, 0, 1, {}, arrival=1.0), make_flow(1, 0, 1, {}, arrival=0.5)]
    with pytest.raises(ValueError):
        Simulation(cfg, trace)


def test_delay_sensitive_queue_behind_top_level_only(single_link):
    # a voice flow and an elastic flow overload the link; only elastic traffic queues
    trace = [make_flow(0, 0, 1, {}, w=3.0, cap=4.0, sensitive=True, duration=5.0),
             make_flow(1, 0, 1, {}, w=1.0, cap=20.0, duration=5.0)]
    cfg = SimConfig(topology=single_link, intensity=0, duration=6,
                    pricing=PriceUpdateConfig(mu=1e-6, n=0.0, adaptive=False))
    rep = replay_flow_trace(cfg, trace)
    by = {r["id"]: r for r in rep.flows}
    assert by[0]["queue_delay"] == 0.0
    assert by[1]["queue_delay"] > 0.0
