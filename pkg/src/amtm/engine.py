"""Discrete-time orchestration of flows, link queues and the control plane.

Every tick: retire expired flows, admit flows already present at the tick
instant, run the periodic controller if due (TE period boundary for the
baselines, price update for AMTM), admit the rest of the tick's arrivals,
advance the link queues, accumulate metrics.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path as FsPath
from typing import Any, Callable, Sequence

import numpy as np

from .baselines import centralized_period, semi_centralized_period, share_group
from .link_dynamics import (DEFAULT_BUFFER_MBIT, DEFAULT_TICK, DeepQueues, StateReport,
                            propagate_shallow, queueing_estimate, step_deep)
from .metrics import (AMTM, CENTRALIZED, FLOW_RECORD_DTYPE, SCHEMES, SEMI_CENTRALIZED,
                      SimReport)
from .pricing import (DEEP, FLOW_BASED, SHALLOW, PriceUpdateConfig, fdtc_allocate,
                      nipu_deep, nipu_shallow)
from .topology import DEFAULT_K, Network, PathSet, build_pathset, load_topology
from .traffic import DEFAULT_ALPHA, DEFAULT_CLASSES, Flow, FlowGenerator, TrafficClass

_TOL = 1e-9


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    """One simulation run.

    The run covers ``warmup + duration`` seconds; metrics exclude the
    warm-up.  ``preload`` starts from a stationary sample of the arrival
    process and ``stationary_flows`` adds that many never-ending flows at
    time zero.  ``price_delay`` is the control-plane staleness in price
    update intervals.
    """

    topology: Any = None
    K: int = DEFAULT_K
    classes: tuple[TrafficClass, ...] = DEFAULT_CLASSES
    alpha: float = DEFAULT_ALPHA
    intensity: float = 30.0
    duration: float = 60.0
    warmup: float = 0.0
    tick: float = DEFAULT_TICK
    pricing: PriceUpdateConfig = field(default_factory=PriceUpdateConfig)
    scheme: str = AMTM
    te_period: float = 10.0
    seed: int = 0
    preload: bool = False
    stationary_flows: int = 0
    price_delay: int = 1
    buffer_mbit: float = DEFAULT_BUFFER_MBIT
    priority: bool = True
    sample_interval: float | None = None
    record_hops: bool = False

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}")
        if not self.duration > 0:
            raise ConfigError("duration must be positive")
        if self.warmup < 0:
            raise ConfigError("warm-up must be nonnegative")
        if not self.tick > 0:
            raise ConfigError("tick must be positive")
        if not self.tick <= self.pricing.interval + _TOL:
            raise ConfigError("tick must not exceed the price update interval")
        if not self.pricing.interval <= self.te_period + _TOL:
            raise ConfigError("price update interval must not exceed the TE period")
        multiples = {"price update interval": self.pricing.interval,
                     "TE period": self.te_period, "warm-up": self.warmup,
                     "sample interval": self.sample_every}
        for name, v in multiples.items():
            if abs(v / self.tick - round(v / self.tick)) > 1e-6:
                raise ConfigError(f"{name} must be a multiple of the tick")
        if self.price_delay < 0:
            raise ConfigError("price delay must be nonnegative")
        if not self.buffer_mbit > 0:
            raise ConfigError("buffer bound must be positive")
        if self.stationary_flows < 0:
            raise ConfigError("stationary flow count must be nonnegative")
        if self.intensity < 0:
            raise ConfigError("arrival intensity must be nonnegative")

    @property
    def sample_every(self) -> float:
        return self.pricing.interval if self.sample_interval is None else self.sample_interval

    @property
    def horizon(self) -> float:
        return self.warmup + self.duration


@lru_cache(maxsize=8)
def _cached_pathset(ref: str | None, K: int) -> PathSet:
    return build_pathset(load_topology(ref), K)


def resolve_pathset(cfg: SimConfig) -> PathSet:
    """Candidate path set for the configured topology (cached per process)."""
    topo = cfg.topology
    if isinstance(topo, PathSet):
        return topo
    if isinstance(topo, Network):
        return build_pathset(topo, cfg.K)
    if topo is None or isinstance(topo, (str, FsPath)):
        return _cached_pathset(None if topo is None else str(topo), cfg.K)
    return build_pathset(load_topology(topo), cfg.K)


def generate_trace(cfg: SimConfig, pathset: PathSet) -> list[Flow]:
    """Flow trace implied by the config: stationary, preloaded, then arrivals."""
    gen = FlowGenerator(cfg.intensity, pathset.network.nodes, cfg.classes, cfg.seed, cfg.alpha)
    trace = gen.stationary(cfg.stationary_flows, 0.0) if cfg.stationary_flows else []
    if cfg.preload:
        # the margin covers schemes that start service up to one period late
        trace += gen.preload(0.0, margin=cfg.te_period)
    if cfg.intensity > 0:
        trace += gen.generate(0.0, cfg.horizon)
    trace.sort(key=lambda f: (f.arrival, f.id))
    return trace


# --- state ----------------------------------------------------------------------

class _Table:
    """Growable column store with slot reuse."""

    def __init__(self, columns: dict[str, Any], size: int = 256):
        self._columns = columns
        self.size = size
        self.cols = {k: np.zeros(size, dtype=d) for k, d in columns.items()}
        self.active = np.zeros(size, dtype=bool)
        self._free = list(range(size - 1, -1, -1))

    def __getitem__(self, k: str) -> np.ndarray:
        return self.cols[k]

    def add(self, **values) -> int:
        if not self._free:
            old = self.size
            self.size *= 2
            for k, a in self.cols.items():
                b = np.zeros(self.size, dtype=a.dtype)
                b[:old] = a
                self.cols[k] = b
            act = np.zeros(self.size, dtype=bool)
            act[:old] = self.active
            self.active = act
            self._free = list(range(self.size - 1, old - 1, -1))
        i = self._free.pop()
        for k in self.cols:
            self.cols[k][i] = values.get(k, 0)
        self.active[i] = True
        return i

    def remove(self, i: int) -> None:
        self.active[i] = False
        self._free.append(i)


@dataclass
class SimState:
    """Mutable run state: clock, active flows, prices and queues."""

    clock: float
    flows: dict[int, Flow]
    prices: np.ndarray
    queues: DeepQueues
    n: float
    mean_queue_time: float = 0.0


class Simulation:
    """Single-threaded engine for one configuration and one flow trace."""

    def __init__(self, cfg: SimConfig, trace: Sequence[Flow], pathset: PathSet | None = None,
                 observer: Callable[["Simulation"], None] | None = None):
        arrivals = [f.arrival for f in trace]
        if any(b < a for a, b in zip(arrivals, arrivals[1:])):
            raise ValueError("trace must be sorted by arrival time")
        self.cfg = cfg
        self.ps = pathset if pathset is not None else resolve_pathset(cfg)
        self.net = self.ps.network
        self.trace = [f.copy() for f in trace]
        for f in self.trace:
            f.routes = {}
        self.observer = observer
        P, E = self.ps.n_paths, self.net.n_links
        self.levels = 2 if (cfg.priority and cfg.pricing.regime != SHALLOW) else 1
        self.state = SimState(0.0, {}, np.zeros(E), DeepQueues.empty(self.ps, self.levels),
                              cfg.pricing.n)
        self.computed = np.zeros(E)  # latest prices computed at the server
        self.flow_tab = _Table({"w": float, "alpha": float, "cap": float, "rate": float,
                                "last": float, "rint": float, "admitted": float,
                                "path": np.int64, "level": np.int64, "qstart": float,
                                "qacc": float, "since": float})
        self.meters = _Table({"flow": np.int64, "path": np.int64, "level": np.int64,
                              "rate": float})
        self._slot_of: dict[int, int] = {}
        self._meters_of: dict[int, list[int]] = {}
        self._groups: dict[tuple, set[int]] = {}
        self._alloc: dict[tuple, Any] = {}
        self._pending: list[Flow] = []
        self._departures: list[tuple[float, int]] = []
        self._deliveries: deque = deque()
        self._dirty = True
        self._injected = np.zeros((self.levels, P))
        self._utility = 0.0
        self._cum_w = np.zeros((self.levels, P))
        self._queue_est = np.zeros(E)
        self._records: list[tuple] = []
        self._path_delay = self.ps.path_price(self.net.delay)

    # -- flow bookkeeping ------------------------------------------------------

    def _level(self, f: Flow) -> int:
        return 0 if (self.levels == 2 and f.delay_sensitive) else self.levels - 1

    def _admit(self, f: Flow, admitted: float) -> int:
        lvl = self._level(f)
        slot = self.flow_tab.add(w=f.utility.weight, alpha=f.utility.alpha, cap=f.cap,
                                 last=self.state.clock, admitted=admitted, path=-1, level=lvl,
                                 since=self.state.clock)
        self._slot_of[f.id] = slot
        self._meters_of[slot] = []
        self.state.flows[f.id] = f
        end = f.end if self.cfg.scheme != CENTRALIZED else admitted + f.duration
        heapq.heappush(self._departures, (end, f.id))
        self._set_routes(f, f.routes)
        return slot

    def _mark_path(self, slot: int, path: int) -> None:
        ft = self.flow_tab
        old = int(ft["path"][slot])
        if old == path:
            return
        lvl = int(ft["level"][slot])
        if old >= 0:
            ft["qacc"][slot] += self._cum_w[lvl, old] - ft["qstart"][slot]
        ft["path"][slot] = path
        ft["qstart"][slot] = self._cum_w[lvl, path] if path >= 0 else 0.0

    def _set_routes(self, f: Flow, routes: dict[int, float]) -> None:
        slot = self._slot_of[f.id]
        ft, mt = self.flow_tab, self.meters
        t = self.state.clock
        ft["rint"][slot] += ft["rate"][slot] * (t - ft["last"][slot])
        ft["last"][slot] = t
        for m in self._meters_of[slot]:
            mt.remove(m)
        lvl = int(ft["level"][slot])
        ms = [mt.add(flow=slot, path=p, level=lvl, rate=x) for p, x in routes.items()]
        self._meters_of[slot] = ms
        f.routes = dict(routes)
        ft["rate"][slot] = float(sum(routes.values()))
        if routes:
            self._mark_path(slot, max(routes, key=lambda p: (routes[p], -p)))
        self._dirty = True

    def _retire(self, fid: int) -> None:
        f = self.state.flows.pop(fid)
        slot = self._slot_of.pop(fid)
        ft = self.flow_tab
        t = self.state.clock
        ft["rint"][slot] += ft["rate"][slot] * (t - ft["last"][slot])
        self._mark_path(slot, -1)
        # rates and waits accrue per tick from the admission tick onward
        life = t - ft["since"][slot]
        mean_rate = ft["rint"][slot] / life if life > 0 else ft["rate"][slot]
        qd = ft["qacc"][slot] / life if life > 0 else 0.0
        self._records.append((f.id, f.cls.name, f.delay_sensitive, f.arrival,
                              ft["admitted"][slot], t, mean_rate, qd))
        for m in self._meters_of.pop(slot):
            self.meters.remove(m)
        ft.remove(slot)
        if self.cfg.scheme == SEMI_CENTRALIZED:
            key = (f.src, f.dst)
            self._groups[key].discard(fid)
            self._reshare(key)
        self._dirty = True

    def active_flows(self) -> list[Flow]:
        """Active flows with ``routes`` synced to the current meters."""
        mt = self.meters
        for fid, f in self.state.flows.items():
            slot = self._slot_of[fid]
            f.routes = {int(mt["path"][m]): float(mt["rate"][m]) for m in self._meters_of[slot]}
        return list(self.state.flows.values())

    def _refresh_totals(self) -> None:
        if not self._dirty:
            return
        mt, ft = self.meters, self.flow_tab
        P = self.ps.n_paths
        on = mt.active
        idx = mt["level"][on] * P + mt["path"][on]
        self._injected = np.bincount(idx, weights=mt["rate"][on],
                                     minlength=self.levels * P).reshape(self.levels, P)
        fa = ft.active
        x = ft["rate"][fa]
        a = ft["alpha"][fa]
        self._utility = float(np.sum(ft["w"][fa] / (1.0 - a) * x ** (1.0 - a)))
        self._dirty = False

    # -- AMTM ----------------------------------------------------------------------

    def _apply_prices(self, prices: np.ndarray) -> None:
        """Install delivered prices and re-meter every active flow."""
        self.state.prices = prices
        mt, ft = self.meters, self.flow_tab
        on = np.flatnonzero(mt.active)
        if len(on) == 0:
            return
        t = self.state.clock
        pp = self.ps.path_price(prices)
        fl = mt["flow"][on]
        price = pp[mt["path"][on]]
        with np.errstate(divide="ignore", over="ignore"):
            raw = (ft["w"][fl] / price) ** (1.0 / ft["alpha"][fl])
        rate = np.where(price > 0, np.minimum(ft["cap"][fl], raw), ft["cap"][fl])
        mt["rate"][on] = rate
        fa = np.flatnonzero(ft.active)
        ft["rint"][fa] += ft["rate"][fa] * (t - ft["last"][fa])
        ft["last"][fa] = t
        ft["rate"][fl] = rate  # one meter per flow under AMTM
        self._dirty = True

    def _nipu(self, acc: dict) -> np.ndarray:
        cfg = self.cfg
        ticks = acc["ticks"]
        report = StateReport(acc["injected"] / ticks, acc["carried"] / ticks,
                             self.state.queues.total_backlog(), acc["idle"] / ticks,
                             acc["backlog"] / ticks)
        # delay-sensitive flows only queue behind the top level
        self._queue_est = queueing_estimate(self.state.queues.backlog[0], self.ps)
        pc = cfg.pricing
        prices = self.computed
        if pc.regime == DEEP:
            upd = nipu_deep(prices, report, self.ps, pc, self.state.n)
            new, self.state.n, self.state.mean_queue_time = upd
        elif pc.regime == SHALLOW:
            new = nipu_shallow(prices, report, self.ps, pc.mu)
        else:
            # flow-based: the metered path rates are exactly the injected rates
            load = self.ps.phi.T @ report.injected
            new = np.maximum(0.0, prices + pc.mu * (load - self.net.capacity))
        self.computed = new
        return new

    # -- baselines -------------------------------------------------------------------

    def _centralized_boundary(self) -> int:
        t = self.state.clock
        arrived = [f for f in self._pending if f.arrival <= t + _TOL]
        self._pending = [f for f in self._pending if f.arrival > t + _TOL]
        active = self.active_flows()
        res = centralized_period(active, arrived, self.ps, self._prev_prices)
        if res.prices is not None:
            self._prev_prices = res.prices
        for f in arrived:
            if f.routes:
                self._admit(f, min(t, self._service_start(f)))
            else:
                self._reject(f, t)
        for fid, routes in res.rates.items():
            self._set_routes(self.state.flows[fid], routes)
        return res.messages

    def _reject(self, f: Flow, t: float) -> None:
        self._records.append((f.id, f.cls.name, f.delay_sensitive, f.arrival, t, t, 0.0, 0.0))

    def _reshare(self, key: tuple) -> None:
        alloc = self._alloc.get(key)
        members = [self.state.flows[i] for i in sorted(self._groups.get(key, ()))]
        if not members:
            return
        if alloc is None:
            rates = {f.id: {} for f in members}
        else:
            rates = share_group(members, alloc)
        for f in members:
            self._set_routes(f, rates.get(f.id, {}))

    def _semi_boundary(self) -> int:
        demand: dict[tuple, dict[str, float]] = {}
        for key, ids in self._groups.items():
            if not ids:
                continue
            d = {"ds": 0.0, "elastic": 0.0}
            for i in ids:
                f = self.state.flows[i]
                d["ds" if f.delay_sensitive else "elastic"] += f.cap
            demand[key] = d
        self._alloc, messages = semi_centralized_period(demand, self.ps)
        for key in sorted(self._groups, key=repr):
            self._reshare(key)
        return messages

    def _service_start(self, f: Flow) -> float:
        """When service of ``f`` starts under the configured scheme."""
        if self.cfg.scheme == CENTRALIZED:
            T = self.cfg.te_period
            return math.ceil(f.arrival / T - 1e-9) * T
        return f.arrival

    def _arrive(self, f: Flow) -> None:
        scheme = self.cfg.scheme
        t = self.state.clock
        if f.arrival < 0 and self._service_start(f) + f.duration <= 0:
            return  # a preloaded flow that finished before the run started
        admitted = f.arrival if f.arrival < 0 else max(f.arrival, t)
        if scheme == AMTM:
            alloc = fdtc_allocate(f, self.ps, self.state.prices, self.net.delay, self._queue_est)
            if alloc.status == "rejected":
                self._reject(f, t)
                return
            self._admit(f, admitted)
        elif scheme == CENTRALIZED:
            self._pending.append(f)
        else:
            key = (f.src, f.dst)
            if not self.ps.candidates(*key):
                self._reject(f, t)
                return
            f.routes = {}
            self._admit(f, admitted)
            self._groups.setdefault(key, set()).add(f.id)
            self._reshare(key)

    # -- main loop -----------------------------------------------------------------

    def run(self) -> SimReport:
        cfg, ps, net = self.cfg, self.ps, self.net
        dt = cfg.tick
        n_ticks = int(round(cfg.horizon / dt))
        nipu_every = int(round(cfg.pricing.interval / dt))
        period_every = int(round(cfg.te_period / dt))
        sample_every = int(round(cfg.sample_every / dt))
        n_periods = -(-n_ticks // period_every)
        E, P, L = net.n_links, ps.n_paths, self.levels
        cap = net.capacity
        deep = cfg.pricing.regime != SHALLOW
        self._prev_prices = None

        tick_u = np.zeros(n_ticks)
        tick_n = np.zeros(n_ticks, dtype=np.int64)
        tick_r = np.zeros(n_ticks)
        s_t, s_price, s_back, s_served, s_hops = [], [], [], [], []
        nipu_t, n_tr, w_tr = [], [], []
        round_t, round_msg = [], []
        per_u = np.zeros(n_periods)
        per_msg = np.zeros(n_periods, dtype=np.int64)
        per_active = np.zeros(n_periods, dtype=np.int64)
        acc = self._new_acc()
        served_acc = np.zeros(E)
        served_ticks = 0

        trace = self.trace
        nxt = 0
        msg_per_nipu = net.n_nodes + net.n_links
        for k in range(n_ticks):
            t = k * dt
            self.state.clock = t
            per = k // period_every
            while self._departures and self._departures[0][0] <= t + _TOL:
                _, fid = heapq.heappop(self._departures)
                if fid in self.state.flows:
                    self._retire(fid)
            # flows already present at this instant (preload, t = 0) precede the boundary
            while nxt < len(trace) and trace[nxt].arrival <= t + _TOL:
                self._arrive(trace[nxt])
                nxt += 1

            if k % period_every == 0:
                if cfg.scheme == CENTRALIZED:
                    m = self._centralized_boundary()
                elif cfg.scheme == SEMI_CENTRALIZED:
                    m = self._semi_boundary()
                else:
                    m = None
                if m is not None:
                    per_msg[per] += m
                    round_t.append(t)
                    round_msg.append(m)
                per_active[per] = len(self.state.flows)

            if cfg.scheme == AMTM and k > 0 and k % nipu_every == 0:
                while self._deliveries and self._deliveries[0][0] <= k:
                    self._apply_prices(self._deliveries.popleft()[1])
                new = self._nipu(acc)
                acc = self._new_acc()
                if cfg.price_delay == 0:
                    self._apply_prices(new)
                else:
                    self._deliveries.append((k + cfg.price_delay * nipu_every, new))
                per_msg[per] += msg_per_nipu
                round_t.append(t)
                round_msg.append(msg_per_nipu)
                nipu_t.append(t)
                n_tr.append(self.state.n)
                w_tr.append(self.state.mean_queue_time)

            while nxt < len(trace) and trace[nxt].arrival < t + dt - _TOL:
                self._arrive(trace[nxt])
                nxt += 1

            self._refresh_totals()
            inj = self._injected
            if deep:
                q, ls = step_deep(ps, inj, self.state.queues, dt, cfg.buffer_mbit)
                self.state.queues = q
                # a packet waits for the backlog of its own and higher levels
                wait = np.cumsum([ps.link_sum(b) for b in q.backlog], axis=0) / cap
                self._cum_w += (ps.phi @ wait.T).T * dt
            else:
                ls = propagate_shallow(ps, inj.sum(axis=0))
            acc["ticks"] += 1
            acc["injected"] += ls.injected
            acc["carried"] += ls.carried
            acc["idle"] += ls.idle
            acc["backlog"] += ls.backlog
            served = cap - ls.idle
            served_acc += served
            served_ticks += 1

            tick_u[k] = self._utility
            tick_n[k] = len(self.state.flows)
            tick_r[k] = float(ls.backlog.sum())
            per_u[per] += self._utility * dt

            if (k + 1) % sample_every == 0:
                s_t.append(t + dt)
                s_price.append(self.state.prices.copy())
                s_back.append(ps.link_sum(ls.backlog))
                s_served.append(served_acc / served_ticks)
                if cfg.record_hops:
                    s_hops.append(ls.backlog.copy())
                served_acc = np.zeros(E)
                served_ticks = 0
                if self.observer is not None:
                    self.state.clock = t + dt
                    self.observer(self)
                    self.state.clock = t

        self.state.clock = n_ticks * dt
        rec = np.array(self._records, dtype=FLOW_RECORD_DTYPE)
        as2 = lambda rows: np.array(rows).reshape(len(rows), E)
        return SimReport(
            scheme=cfg.scheme, n_nodes=net.n_nodes, n_links=E, capacity=cap.copy(),
            tick=dt, measure_start=cfg.warmup, sample_interval=cfg.sample_every,
            te_period=cfg.te_period, tick_times=np.arange(n_ticks) * dt, utility=tick_u,
            active_flows=tick_n, total_backlog=tick_r, sample_times=np.array(s_t),
            prices=as2(s_price), link_backlog=as2(s_back), served=as2(s_served),
            nipu_times=np.array(nipu_t), n_trace=np.array(n_tr), wbar_trace=np.array(w_tr),
            period_starts=np.arange(n_periods) * cfg.te_period, period_utility=per_u,
            period_messages=per_msg, period_active_flows=per_active, flows=rec,
            overflow_mbit=float(self.state.queues.overflow),
            round_times=np.array(round_t), round_messages=np.array(round_msg, dtype=np.int64),
            hop_backlog=np.array(s_hops) if cfg.record_hops else None)

    def _new_acc(self) -> dict:
        H, E, P = self.ps.n_hops, self.net.n_links, self.ps.n_paths
        return {"ticks": 0, "injected": np.zeros(P), "carried": np.zeros(H),
                "idle": np.zeros(E), "backlog": np.zeros(H)}


def replay_flow_trace(cfg: SimConfig, trace: Sequence[Flow], pathset: PathSet | None = None,
                      observer: Callable[[Simulation], None] | None = None) -> SimReport:
    """Run ``cfg`` with arrivals taken from ``trace`` (sorted by arrival)."""
    return Simulation(cfg, trace, pathset, observer).run()


def run(cfg: SimConfig, pathset: PathSet | None = None,
        observer: Callable[[Simulation], None] | None = None) -> SimReport:
    ps = pathset if pathset is not None else resolve_pathset(cfg)
    return replay_flow_trace(cfg, generate_trace(cfg, ps), ps, observer)


def with_scheme(cfg: SimConfig, scheme: str, **changes) -> SimConfig:
    return replace(cfg, scheme=scheme, **changes)
