"""Fluid link state under shallow (drop) and deep (buffered) egress queues.

Units: rates in Mbps, backlogs in Mbit, time in seconds.  Per-hop arrays
follow the hop layout of ``PathSet``; deep-queue arrays carry a leading
priority axis (row 0 is served first).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .topology import PathSet

DEFAULT_TICK = 0.01
DEFAULT_BUFFER_MBIT = 10_000.0


class ConvergenceError(RuntimeError):
    pass


@dataclass
class LinkState:
    """Rates and backlogs of every hop plus per-link idle bandwidth.

    ``inflow`` is the arrival rate at each hop (r^{s-1}), ``carried`` its
    departure rate (r^s) and ``injected`` the per-path edge rate (r^0).
    """

    pathset: PathSet
    injected: np.ndarray
    inflow: np.ndarray
    carried: np.ndarray
    idle: np.ndarray
    backlog: np.ndarray

    @property
    def retained(self) -> np.ndarray:
        """Drop rate (shallow) or retention rate (deep) per hop."""
        return self.inflow - self.carried

    @property
    def overload(self) -> np.ndarray:
        """Cumulative drop/retention along the path up to each hop, r^0 - r^s."""
        return self.injected[self.pathset.hop_path] - self.carried

    @property
    def served(self) -> np.ndarray:
        return self.pathset.link_sum(self.carried)

    def report(self, mean_backlog: np.ndarray | None = None) -> "StateReport":
        return StateReport(
            injected=self.injected.copy(), carried=self.carried.copy(),
            backlog=self.backlog.copy(), idle=self.idle.copy(),
            mean_backlog=None if mean_backlog is None else mean_backlog.copy())


@dataclass
class StateReport:
    """What the switches upload at a price update.

    ``mean_backlog`` is the average backlog since the previous upload; when
    absent the instantaneous backlog stands in for it.
    """

    injected: np.ndarray  # (P,)
    carried: np.ndarray  # (H,)
    backlog: np.ndarray  # (H,)
    idle: np.ndarray  # (E,)
    mean_backlog: np.ndarray | None = None

    def inflow(self, pathset: PathSet) -> np.ndarray:
        prev = np.where(pathset.is_first, 0, pathset.prev_hop)
        return np.where(pathset.is_first, self.injected[pathset.hop_path], self.carried[prev])

    def retained(self, pathset: PathSet) -> np.ndarray:
        return self.inflow(pathset) - self.carried

    def overload(self, pathset: PathSet) -> np.ndarray:
        return pathset.path_cumsum(self.retained(pathset))

    @classmethod
    def average(cls, reports: list["StateReport"]) -> "StateReport":
        """Rate fields averaged; backlog taken from the last report."""
        mean = lambda name: np.mean([getattr(r, name) for r in reports], axis=0)
        last = reports[-1]
        return cls(mean("injected"), mean("carried"), last.backlog.copy(), mean("idle"),
                   mean("backlog"))


# --- shallow queues ----------------------------------------------------------------

def propagate_shallow(pathset: PathSet, injected: np.ndarray, tol: float = 1e-9,
                      max_sweeps: int = 1000) -> LinkState:
    """Fair-drop forwarding: an overloaded link passes every incident hop at
    the common fraction ``C / demand``.

    Cross-path coupling is resolved by sweeping positions in order until no
    hop rate moves by more than ``tol``.
    """
    injected = np.asarray(injected, dtype=float)
    if np.any(injected < 0):
        raise ValueError("injected rates must be nonnegative")
    cap = pathset.network.capacity
    first = pathset.is_first
    inflow = injected[pathset.hop_path].copy()
    carried = inflow.copy()
    by_pos = [np.flatnonzero(pathset.hop_pos == s) for s in range(1, int(pathset.length.max(initial=0)) + 1)]
    for _ in range(max_sweeps):
        before = carried.copy()
        for hops in by_pos:
            demand = pathset.link_sum(inflow)
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                f = np.where(demand > cap, cap / demand, 1.0)
            carried[hops] = inflow[hops] * f[pathset.hop_link[hops]]
            nxt = hops + 1
            nxt = nxt[nxt < pathset.n_hops]
            nxt = nxt[~first[nxt]]
            inflow[nxt] = carried[nxt - 1]
        if np.max(np.abs(carried - before), initial=0.0) < tol:
            break
    else:
        raise ConvergenceError(f"shallow propagation did not settle in {max_sweeps} sweeps")
    # final pass so carried and idle are consistent with the settled inflow
    demand = pathset.link_sum(inflow)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        f = np.where(demand > cap, cap / demand, 1.0)
    carried = inflow * f[pathset.hop_link]
    idle = np.maximum(cap - pathset.link_sum(carried), 0.0)
    return LinkState(pathset, injected, inflow, carried, idle, np.zeros(pathset.n_hops))


# --- deep queues --------------------------------------------------------------------

@dataclass
class DeepQueues:
    """Virtual queues of every hop, one row per priority level."""

    backlog: np.ndarray  # (L, H) Mbit
    departure: np.ndarray  # (L, H) Mbps, last tick
    overflow: float = 0.0  # cumulative Mbit dropped at the buffer bound
    overflow_per_link: np.ndarray | None = field(default=None)

    @classmethod
    def empty(cls, pathset: PathSet, levels: int = 1) -> "DeepQueues":
        z = np.zeros((levels, pathset.n_hops))
        return cls(z, z.copy(), 0.0, np.zeros(pathset.network.n_links))

    @property
    def levels(self) -> int:
        return self.backlog.shape[0]

    def total_backlog(self) -> np.ndarray:
        return self.backlog.sum(axis=0)


def step_deep(pathset: PathSet, injected: np.ndarray, queues: DeepQueues,
              dt: float = DEFAULT_TICK, buffer_mbit: float = DEFAULT_BUFFER_MBIT
              ) -> tuple[DeepQueues, LinkState]:
    """Advance every virtual queue by one tick of length ``dt``.

    ``injected`` is ``(L, P)`` (or ``(P,)`` for a single level).  Arrivals at
    a first hop are the injected rate; elsewhere they are the upstream
    departure of the previous tick.  Each link spends its ``C * dt`` budget
    level by level: backlog first, shared in proportion to backlog, then the
    new arrivals, shared in proportion to arrival rate.
    """
    if not dt > 0:
        raise ValueError("tick length must be positive")
    injected = np.atleast_2d(np.asarray(injected, dtype=float))
    L = queues.levels
    if injected.shape != (L, pathset.n_paths):
        raise ValueError(f"injected shape {injected.shape} does not match {(L, pathset.n_paths)}")
    link = pathset.hop_link
    first = pathset.is_first
    prev = np.where(first, 0, pathset.prev_hop)
    budget = pathset.network.capacity * dt

    arrival = np.where(first, injected[:, pathset.hop_path], queues.departure[:, prev])
    backlog = np.empty_like(queues.backlog)
    departure = np.empty_like(queues.departure)
    overflow_link = queues.overflow_per_link.copy() if queues.overflow_per_link is not None \
        else np.zeros(pathset.network.n_links)
    overflow = queues.overflow
    for lvl in range(L):
        R = queues.backlog[lvl]
        A = arrival[lvl] * dt
        # the served volume on a link is min(total, budget), so only the
        # totals need aggregating
        tot_R = pathset.link_sum(R)
        used_R = np.minimum(tot_R, budget)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            frac_R = np.where(tot_R > used_R, used_R / tot_R, 1.0)
        budget = budget - used_R
        tot_A = pathset.link_sum(A)
        used_A = np.minimum(tot_A, budget)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            frac_A = np.where(tot_A > used_A, used_A / tot_A, 1.0)
        budget = np.maximum(budget - used_A, 0.0)
        served = R * frac_R[link] + A * frac_A[link]
        new_R = R + A - served
        np.maximum(new_R, 0.0, out=new_R)
        if new_R.max(initial=0.0) > buffer_mbit:
            excess = np.maximum(new_R - buffer_mbit, 0.0)
            overflow += float(excess.sum())
            overflow_link += pathset.link_sum(excess)
            new_R -= excess
        backlog[lvl] = new_R
        departure[lvl] = served / dt

    nq = DeepQueues(backlog, departure, overflow, overflow_link)
    state = LinkState(
        pathset, injected.sum(axis=0), arrival.sum(axis=0), departure.sum(axis=0),
        budget / dt, backlog.sum(axis=0))
    return nq, state


def queueing_estimate(backlog: np.ndarray, pathset: PathSet) -> np.ndarray:
    """Little's-law queueing time per link in seconds: total backlog over capacity."""
    return pathset.link_sum(np.asarray(backlog, dtype=float)) / pathset.network.capacity
