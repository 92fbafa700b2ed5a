"""Directed WAN graph, candidate paths and their link incidence structures.

Every per-link array in the package is indexed by link id (position in
``Network.links``) and every per-hop array by hop id, where a hop is one
``(path, position)`` pair.  ``PathSet`` holds the bookkeeping that maps
between the two.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from importlib import resources
from itertools import permutations
from pathlib import Path as FsPath
from typing import Callable, Hashable, Iterable, Sequence

import numpy as np
from scipy import sparse

DEFAULT_K = 5
DEFAULT_CAPACITY_MBPS = 5000.0
BUNDLED_TOPOLOGY = "wan25.json"


class TopologyError(ValueError):
    """Raised for malformed topology documents or invalid graphs."""


@dataclass(frozen=True)
class Link:
    src: Hashable
    dst: Hashable
    capacity: float  # Mbps
    delay: float = 0.0  # propagation delay, ms


@dataclass(frozen=True)
class Path:
    """A simple path, stored as its ordered link ids and node sequence."""

    links: tuple[int, ...]
    nodes: tuple

    @property
    def source(self):
        return self.nodes[0]

    @property
    def destination(self):
        return self.nodes[-1]

    def __len__(self) -> int:
        return len(self.links)


class Network:
    """Directed graph with per-link capacity (Mbps) and propagation delay (ms)."""

    def __init__(self, nodes: Iterable[Hashable], links: Iterable[Link]):
        self.nodes = tuple(nodes)
        self.links = tuple(links)
        node_set = set(self.nodes)
        if len(node_set) != len(self.nodes):
            raise TopologyError("duplicate node ids")
        self.link_index: dict[tuple, int] = {}
        for i, ln in enumerate(self.links):
            where = f"link {i} ({ln.src}->{ln.dst})"
            if ln.src not in node_set or ln.dst not in node_set:
                raise TopologyError(f"{where}: unknown endpoint")
            if ln.src == ln.dst:
                raise TopologyError(f"{where}: self loop")
            if not ln.capacity > 0:
                raise TopologyError(f"{where}: nonpositive capacity {ln.capacity}")
            if not ln.delay >= 0:
                raise TopologyError(f"{where}: negative delay {ln.delay}")
            if (ln.src, ln.dst) in self.link_index:
                raise TopologyError(f"{where}: duplicate directed link")
            self.link_index[(ln.src, ln.dst)] = i
        self.capacity = np.array([ln.capacity for ln in self.links], dtype=float)
        self.delay = np.array([ln.delay for ln in self.links], dtype=float)
        self._adj: dict[Hashable, list[tuple[Hashable, int]]] = {n: [] for n in self.nodes}
        for i, ln in enumerate(self.links):
            self._adj[ln.src].append((ln.dst, i))
        for nbrs in self._adj.values():
            nbrs.sort(key=lambda t: t[0])

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_links(self) -> int:
        return len(self.links)

    def out_links(self, node) -> list[tuple[Hashable, int]]:
        """``(neighbor, link id)`` pairs leaving ``node``, sorted by neighbor."""
        return self._adj[node]

    def to_document(self) -> dict:
        return {
            "nodes": list(self.nodes),
            "links": [
                {"src": ln.src, "dst": ln.dst, "capacity_mbps": ln.capacity,
                 "delay_ms": ln.delay, "directed": True}
                for ln in self.links
            ],
        }

    def __repr__(self) -> str:
        return f"Network({self.n_nodes} nodes, {self.n_links} directed links)"


def network_from_document(doc: dict) -> Network:
    """Build a ``Network`` from the topology JSON document layout.

    Links with ``"directed": false`` (the default when the key is missing)
    are expanded into one link per direction.
    """
    try:
        nodes = list(doc["nodes"])
        raw_links = list(doc["links"])
    except (KeyError, TypeError) as exc:
        raise TopologyError(f"topology document missing field: {exc}") from exc
    links = []
    for i, item in enumerate(raw_links):
        try:
            src, dst = item["src"], item["dst"]
            cap = float(item["capacity_mbps"])
            delay = float(item.get("delay_ms", 0.0))
        except (KeyError, TypeError, ValueError) as exc:
            raise TopologyError(f"link entry {i} malformed: {exc}") from exc
        if not cap > 0:
            raise TopologyError(f"link entry {i} ({src}->{dst}): nonpositive capacity {cap}")
        links.append(Link(src, dst, cap, delay))
        if not item.get("directed", False):
            links.append(Link(dst, src, cap, delay))
    return Network(nodes, links)


def load_topology(source: str | FsPath | dict | None = None) -> Network:
    """Load a topology from a JSON file path, an already-parsed document,
    or (with no argument) the bundled 25-node sample."""
    if source is None:
        text = resources.files("amtm.data").joinpath(BUNDLED_TOPOLOGY).read_text()
        return network_from_document(json.loads(text))
    if isinstance(source, dict):
        return network_from_document(source)
    try:
        doc = json.loads(FsPath(source).read_text())
    except json.JSONDecodeError as exc:
        raise TopologyError(f"cannot parse {source}: {exc}") from exc
    return network_from_document(doc)


def generate_wan_topology(n_nodes: int = 25, n_edges: int = 55,
                          capacity: float = DEFAULT_CAPACITY_MBPS,
                          seed: int = 7, width_km: float = 8000.0,
                          height_km: float = 3000.0) -> dict:
    """Synthesize a WAN-like topology document.

    Nodes are scattered on a plane, joined by a Euclidean minimum spanning
    tree and then by the shortest remaining node pairs until ``n_edges``
    bidirectional edges exist.  Delay is distance over 200 km/ms (fiber).
    """
    if n_edges < n_nodes - 1 or n_edges > n_nodes * (n_nodes - 1) // 2:
        raise TopologyError("edge count cannot form a simple connected graph")
    rng = np.random.default_rng(seed)
    xy = rng.uniform(0, 1, size=(n_nodes, 2)) * [width_km, height_km]
    dist = np.linalg.norm(xy[:, None, :] - xy[None, :, :], axis=-1)
    mst = sparse.csgraph.minimum_spanning_tree(sparse.csr_matrix(dist)).tocoo()
    edges = {tuple(sorted((int(a), int(b)))) for a, b in zip(mst.row, mst.col)}
    iu, ju = np.triu_indices(n_nodes, k=1)
    for k in np.argsort(dist[iu, ju], kind="stable"):
        if len(edges) >= n_edges:
            break
        edges.add((int(iu[k]), int(ju[k])))
    links = [
        {"src": a, "dst": b, "capacity_mbps": capacity,
         "delay_ms": round(float(dist[a, b]) / 200.0, 3), "directed": False}
        for a, b in sorted(edges)
    ]
    return {"nodes": list(range(n_nodes)), "links": links}


# --- k shortest paths ---------------------------------------------------------

def _dijkstra(net: Network, weight: np.ndarray, src, dst, banned_nodes: set,
              banned_links: set) -> tuple[float, tuple, tuple] | None:
    """Least ``(cost, node sequence)`` path, avoiding the banned sets."""
    heap = [(_key(0.0, (src,)), 0.0, (src,), ())]
    settled = set()
    while heap:
        _, cost, nodes, links = heapq.heappop(heap)
        node = nodes[-1]
        if node in settled:
            continue
        settled.add(node)
        if node == dst:
            return cost, nodes, links
        for nbr, lid in net.out_links(node):
            if nbr in settled or nbr in banned_nodes or lid in banned_links:
                continue
            c = cost + float(weight[lid])
            heapq.heappush(heap, (_key(c, nodes + (nbr,)), c, nodes + (nbr,), links + (lid,)))
    return None


def _key(cost: float, nodes: tuple) -> tuple:
    # rounding keeps float summation order from splitting genuine ties
    return (round(cost, 9), nodes)


def yen_k_shortest(net: Network, src, dst, K: int = DEFAULT_K,
                   weight: Sequence[float] | Callable[[Link], float] | None = None
                   ) -> list[Path]:
    """Up to ``K`` loopless paths from ``src`` to ``dst`` by Yen's algorithm.

    Paths come out in nondecreasing total weight; equal weights are ordered
    by their node-id sequence.  ``weight`` is a per-link array, a callable on
    ``Link``, or ``None`` for hop count.  An unreachable destination gives an
    empty list.
    """
    if src == dst:
        raise ValueError("source and destination must differ")
    if K < 1:
        raise ValueError("K must be at least 1")
    if weight is None:
        w = np.ones(net.n_links)
    elif callable(weight):
        w = np.array([weight(ln) for ln in net.links], dtype=float)
    else:
        w = np.asarray(weight, dtype=float)
    if np.any(w < 0):
        raise ValueError("link weights must be nonnegative")

    first = _dijkstra(net, w, src, dst, set(), set())
    if first is None:
        return []
    accepted = [first]
    candidates: list = []
    seen = {first[1]}
    while len(accepted) < K:
        _, prev_nodes, prev_links = accepted[-1]
        for i in range(len(prev_nodes) - 1):
            spur = prev_nodes[i]
            root_nodes = prev_nodes[: i + 1]
            root_links = prev_links[:i]
            banned_links = {
                links[i] for _, nodes, links in accepted
                if len(nodes) > i + 1 and nodes[: i + 1] == root_nodes
            }
            found = _dijkstra(net, w, spur, dst, set(root_nodes[:-1]), banned_links)
            if found is None:
                continue
            _, spur_nodes, spur_links = found
            nodes = root_nodes[:-1] + spur_nodes
            if nodes in seen:
                continue
            links = root_links + spur_links
            cost = float(sum(w[list(links)]))
            seen.add(nodes)
            heapq.heappush(candidates, (_key(cost, nodes), cost, nodes, links))
        if not candidates:
            break
        _, cost, nodes, links = heapq.heappop(candidates)
        accepted.append((cost, nodes, links))
    return [Path(links=tuple(links), nodes=tuple(nodes)) for _, nodes, links in accepted]


def path_weight(path: Path, weight: Sequence[float]) -> float:
    return float(sum(weight[e] for e in path.links))


def hop_delay_weight(net: Network) -> np.ndarray:
    """Per-link weight ordering paths by hop count, then propagation delay.

    The delay share of any simple path stays below one hop, so hop count
    strictly dominates.
    """
    return 1.0 + net.delay / (net.delay.sum() + 1.0)


# --- path set -----------------------------------------------------------------

@dataclass
class PathSet:
    """Candidate paths for every ordered node pair with their incidence data.

    Hops of a path are stored contiguously: path ``p`` owns hop ids
    ``start[p] .. start[p] + length[p] - 1`` in position order.
    """

    network: Network
    paths: list[Path]
    pair_paths: dict[tuple, list[int]]
    hop_path: np.ndarray = field(init=False)
    hop_pos: np.ndarray = field(init=False)  # 1-based position s
    hop_link: np.ndarray = field(init=False)
    start: np.ndarray = field(init=False)
    length: np.ndarray = field(init=False)

    def __post_init__(self):
        lengths = np.array([len(p) for p in self.paths], dtype=np.int64)
        self.length = lengths
        self.start = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(np.int64)
        self.hop_path = np.repeat(np.arange(len(self.paths)), lengths)
        self.hop_pos = np.concatenate([np.arange(1, n + 1) for n in lengths]) if len(lengths) else np.zeros(0, np.int64)
        self.hop_link = np.array([e for p in self.paths for e in p.links], dtype=np.int64)
        H, P, E = self.n_hops, self.n_paths, self.network.n_links
        self.phi = sparse.csr_matrix(
            (np.ones(H), (self.hop_path, self.hop_link)), shape=(P, E))
        self.phi.data[:] = 1.0  # paths are simple, so no duplicate entries
        self.hop_incidence = sparse.csr_matrix(
            (np.ones(H), (np.arange(H), self.hop_link)), shape=(H, E))
        self.hop_capacity = self.network.capacity[self.hop_link]
        self.first_hop = self.start.copy()
        self.is_first = self.hop_pos == 1
        self.prev_hop = np.where(self.is_first, -1, np.arange(H) - 1)
        self.last_hop = self.start + self.length - 1

    @property
    def n_paths(self) -> int:
        return len(self.paths)

    @property
    def n_hops(self) -> int:
        return int(self.length.sum())

    def candidates(self, src, dst) -> list[int]:
        return self.pair_paths.get((src, dst), [])

    def phi_s(self, p: int, s: int, e: int) -> int:
        """Position-resolved incidence: 1 iff link ``e`` is the ``s``-th link of ``p``."""
        if not 1 <= s <= self.length[p]:
            return 0
        return int(self.hop_link[self.start[p] + s - 1] == e)

    def link_sum(self, hop_values: np.ndarray) -> np.ndarray:
        """Aggregate a per-hop quantity onto links (sum over ``Φ_pe^s``)."""
        return np.bincount(self.hop_link, weights=hop_values, minlength=self.network.n_links)

    def path_sum(self, hop_values: np.ndarray) -> np.ndarray:
        """Aggregate a per-hop quantity along each path."""
        return np.bincount(self.hop_path, weights=hop_values, minlength=self.n_paths)

    def path_cumsum(self, hop_values: np.ndarray) -> np.ndarray:
        """Prefix sums along each path: entry for hop (p, s) is the sum over k <= s."""
        c = np.cumsum(hop_values)
        offset = np.concatenate([[0.0], c])[self.start]
        return c - offset[self.hop_path]

    def path_price(self, link_values: np.ndarray) -> np.ndarray:
        """Per-path sum of a per-link quantity (``Φ @ values``)."""
        return self.phi @ link_values

    def node_pairs(self) -> list[tuple]:
        return list(self.pair_paths)


def build_pathset(net: Network, K: int = DEFAULT_K) -> PathSet:
    """K shortest (hop count, then delay) paths for every ordered node pair."""
    w = hop_delay_weight(net)
    paths: list[Path] = []
    pair_paths: dict[tuple, list[int]] = {}
    for src, dst in permutations(net.nodes, 2):
        found = yen_k_shortest(net, src, dst, K, w)
        if not found:
            continue
        pair_paths[(src, dst)] = list(range(len(paths), len(paths) + len(found)))
        paths.extend(found)
    return PathSet(net, paths, pair_paths)
