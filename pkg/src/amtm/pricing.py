"""Link-price iteration strategies and the price-taking flow allocation.

All updates project onto ``prices >= 0``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .link_dynamics import StateReport, queueing_estimate
from .topology import PathSet
from .traffic import Flow

FLOW_BASED = "flow-based"
SHALLOW = "shallow"
DEEP = "deep"
REGIMES = (FLOW_BASED, SHALLOW, DEEP)


@dataclass(frozen=True)
class PriceUpdateConfig:
    """Parameters of the server-side price update.

    ``mu`` scales the rate mismatch term, ``n`` is the initial backlog gain,
    adapted by ``epsilon`` per update toward the queueing-time threshold
    ``w_star`` (seconds) when ``adaptive`` is set.  ``queue_time_scope``
    chooses which paths enter the average queueing time: ``"active"`` (paths
    currently carrying or holding traffic) or ``"all"`` candidates.
    """

    mu: float = 1e-5
    n: float = 1e-4
    epsilon: float = 1e-5
    w_star: float = 0.2
    regime: str = DEEP
    interval: float = 0.1
    adaptive: bool = True
    queue_time_scope: str = "all"

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError("mu must be positive")
        if not self.n >= 0:
            raise ValueError("n must be nonnegative")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.w_star > 0:
            raise ValueError("w_star must be positive")
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        if not self.interval > 0:
            raise ValueError("interval must be positive")
        if self.queue_time_scope not in ("active", "all"):
            raise ValueError("queue_time_scope must be 'active' or 'all'")


class Allocation(NamedTuple):
    status: str  # "admitted" or "rejected"
    path: int | None
    rate: float

    def theta(self, n_paths: int) -> np.ndarray:
        out = np.zeros(n_paths)
        if self.path is not None:
            out[self.path] = 1.0
        return out


class DeepUpdate(NamedTuple):
    prices: np.ndarray
    n: float
    mean_queue_time: float


def select_path(flow: Flow, pathset: PathSet, prices: np.ndarray, delays_ms: np.ndarray,
                queue_s: np.ndarray | None = None) -> int | None:
    """Shortest-delay candidate for delay-sensitive flows, cheapest otherwise.

    Ties go to the lowest path id.
    """
    cand = pathset.candidates(flow.src, flow.dst)
    if not cand:
        return None
    cand = np.asarray(cand)
    if flow.delay_sensitive:
        per_link = np.asarray(delays_ms, dtype=float)
        if queue_s is not None:
            per_link = per_link + 1000.0 * np.asarray(queue_s)
        score = pathset.path_price(per_link)[cand]
    else:
        score = pathset.path_price(np.asarray(prices, dtype=float))[cand]
    return int(cand[np.argmin(score)])


def fdtc_allocate(flow: Flow, pathset: PathSet, prices: np.ndarray, delays_ms: np.ndarray,
                  queue_s: np.ndarray | None = None, assign: bool = True) -> Allocation:
    """Route a new flow onto one candidate path and meter its price-taking rate.

    ``delays_ms`` are link propagation delays and ``queue_s`` the current
    queueing estimates (seconds).  With ``assign`` the flow's ``routes`` are
    overwritten.
    """
    p = select_path(flow, pathset, prices, delays_ms, queue_s)
    if p is None:
        if assign:
            flow.routes = {}
        return Allocation("rejected", None, 0.0)
    price = float(pathset.path_price(np.asarray(prices, dtype=float))[p])
    rate = flow.utility.optimal_rate(price, flow.cap)
    if assign:
        flow.routes = {p: rate}
    return Allocation("admitted", p, rate)


def path_rates(flows: Sequence[Flow], n_paths: int) -> np.ndarray:
    """Total metered rate per path (``sum_j x_jp Θ_jp``)."""
    out = np.zeros(n_paths)
    for f in flows:
        for p, x in f.routes.items():
            out[p] += x
    return out


def link_load(flows: Sequence[Flow], pathset: PathSet) -> np.ndarray:
    return pathset.phi.T @ path_rates(flows, pathset.n_paths)


def nipu_flow_based(prices: np.ndarray, flows: Sequence[Flow], pathset: PathSet,
                    mu: float) -> np.ndarray:
    """Dual gradient step driven by per-flow metered rates."""
    grad = link_load(flows, pathset) - pathset.network.capacity
    return np.maximum(0.0, prices + mu * grad)


def mismatch(report: StateReport, pathset: PathSet) -> np.ndarray:
    """Per-link overload through the link minus its idle bandwidth."""
    return pathset.link_sum(report.overload(pathset)) - report.idle


def nipu_shallow(prices: np.ndarray, report: StateReport, pathset: PathSet,
                 mu: float) -> np.ndarray:
    return np.maximum(0.0, prices + mu * mismatch(report, pathset))


def backlog_pressure(backlog: np.ndarray, pathset: PathSet) -> np.ndarray:
    """Per link, the sum over hops on it of the backlog at and upstream of that hop."""
    return pathset.link_sum(pathset.path_cumsum(backlog))


def path_queue_times(backlog: np.ndarray, pathset: PathSet) -> np.ndarray:
    """Queueing time a packet entering each path would experience (seconds).

    A queue served in proportion to backlog clears all of a link's backlog
    before new arrivals, so each hop contributes its link's total backlog
    over capacity.
    """
    return pathset.path_price(queueing_estimate(backlog, pathset))


def mean_queue_time(report: StateReport, pathset: PathSet, scope: str = "active") -> float:
    R = report.mean_backlog if report.mean_backlog is not None else report.backlog
    W = path_queue_times(R, pathset)
    if scope == "all":
        return float(W.mean()) if len(W) else 0.0
    active = (report.injected > 0) | (pathset.path_sum(R) > 0)
    return float(W[active].mean()) if active.any() else 0.0


def adapt_n(n: float, w_bar: float, cfg: PriceUpdateConfig) -> float:
    if w_bar > cfg.w_star:
        return n + cfg.epsilon
    return max(0.0, n - cfg.epsilon)


def nipu_deep(prices: np.ndarray, report: StateReport, pathset: PathSet,
              cfg: PriceUpdateConfig, n: float | None = None) -> DeepUpdate:
    """Backlog-aware price update with queueing-time driven gain.

    ``n`` is the gain used at the previous update (``cfg.n`` when omitted).
    The gain is adapted first when ``cfg.adaptive`` is set, then applied.
    """
    n = cfg.n if n is None else n
    w_bar = mean_queue_time(report, pathset, cfg.queue_time_scope)
    if cfg.adaptive:
        n = adapt_n(n, w_bar, cfg)
    step = n * backlog_pressure(report.backlog, pathset) + cfg.mu * mismatch(report, pathset)
    return DeepUpdate(np.maximum(0.0, prices + step), n, w_bar)


def dual_value(prices: np.ndarray, flows: Sequence[Flow], pathset: PathSet) -> float:
    """Lagrange dual at ``prices``: per-flow best response plus ``sum λ_e C_e``.

    Each flow is priced at the cheapest of its selected paths and capped at
    its demand ceiling.
    """
    prices = np.asarray(prices, dtype=float)
    if np.any(prices < 0):
        raise ValueError("prices must be nonnegative")
    pp = pathset.path_price(prices)
    total = float(prices @ pathset.network.capacity)
    for f in flows:
        lam = min(pp[p] for p in f.routes)
        x = f.utility.optimal_rate(lam, f.cap)
        total += float(f.utility.value(x)) - lam * x
    return total
