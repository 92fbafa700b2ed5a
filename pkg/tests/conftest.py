import numpy as np
import pytest

from amtm.engine import resolve_pathset, SimConfig
from amtm.topology import Link, Network, build_pathset
from amtm.traffic import AlphaFair, Flow, TrafficClass, DELAY_SENSITIVE, DELAY_TOLERANT

ELASTIC = TrafficClass("elastic", 100.0, DELAY_TOLERANT, (10.0, 600.0), 1.0, 1.0)
VOICE = TrafficClass("interactive", 10.0, DELAY_SENSITIVE, (10.0, 30.0), 3.0, 1.0)


def make_flow(fid, src, dst, routes, w=1.0, cap=1e9, alpha=0.5, sensitive=False,
              arrival=0.0, duration=np.inf):
    qos = DELAY_SENSITIVE if sensitive else DELAY_TOLERANT
    cls = TrafficClass(f"c{w}-{cap}", cap, qos, (0.0, 1.0), w, 1.0)
    return Flow(fid, cls, src, dst, arrival, duration, AlphaFair(w, alpha), dict(routes))


@pytest.fixture
def line3():
    """a -> b -> c with capacities 10 and 6."""
    net = Network(["a", "b", "c"], [Link("a", "b", 10.0, 1.0), Link("b", "c", 6.0, 1.0)])
    return build_pathset(net, 3)


@pytest.fixture
def diamond():
    """Two disjoint two-hop routes from s to t plus a direct slow link."""
    links = [Link("s", "u", 10.0, 1.0), Link("u", "t", 10.0, 1.0),
             Link("s", "v", 8.0, 2.0), Link("v", "t", 8.0, 2.0),
             Link("s", "t", 4.0, 5.0)]
    return build_pathset(Network(["s", "u", "v", "t"], links), 5)


@pytest.fixture(scope="session")
def wan():
    return resolve_pathset(SimConfig())


def identity_instance(rng):
    """Random line network (1-3 links) with 1-5 single-path flows."""
    n_links = rng.integers(1, 4)
    nodes = list(range(n_links + 1))
    links = [Link(i, i + 1, float(rng.uniform(1, 20))) for i in range(n_links)]
    ps = build_pathset(Network(nodes, links), 3)
    flows = []
    pairs = ps.node_pairs()
    for j in range(rng.integers(1, 6)):
        s, d = pairs[rng.integers(len(pairs))]
        p = ps.candidates(s, d)[0]
        flows.append(make_flow(j, s, d, {p: float(rng.uniform(0, 15))}))
    return ps, flows
