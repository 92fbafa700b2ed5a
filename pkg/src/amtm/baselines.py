"""Centralized NUM oracle and the periodic comparison schemes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize, sparse

from .pricing import backlog_pressure, select_path
from .topology import PathSet
from .traffic import AlphaFair, Flow, alpha_fair_rate, alpha_fair_value

PRICE_CEILING = 1e6


@dataclass
class NumSolution:
    rates: dict[int, dict[int, float]]  # flow id -> {path: rate}
    prices: np.ndarray
    utility: float
    dual: float
    gap: float
    converged: bool
    saturated_links: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def flow_rate(self, flow_id: int) -> float:
        return float(sum(self.rates[flow_id].values()))


class _Problem:
    """Flattened flow/path data for vectorized dual evaluation."""

    def __init__(self, flows: Sequence[Flow], pathset: PathSet):
        self.flows = list(flows)
        self.pathset = pathset
        if not all(isinstance(f.utility, AlphaFair) for f in self.flows):
            raise TypeError("solver supports alpha-fair utilities only")
        self.w = np.array([f.utility.weight for f in self.flows])
        self.alpha = np.array([f.utility.alpha for f in self.flows])
        self.cap = np.array([f.cap for f in self.flows])
        owner, paths = [], []
        for j, f in enumerate(self.flows):
            if not f.routes:
                raise ValueError(f"flow {f.id} has no selected path")
            for p in sorted(f.routes):
                owner.append(j)
                paths.append(p)
        self.owner = np.array(owner, dtype=np.int64)
        self.paths = np.array(paths, dtype=np.int64)
        self.single = len(self.owner) == len(self.flows)

    def best_paths(self, prices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Cheapest selected path and its price, per flow (ties to lowest id)."""
        pp = self.pathset.path_price(prices)[self.paths]
        if self.single:
            return self.paths, pp
        order = np.lexsort((self.paths, pp, self.owner))
        first = np.ones(len(order), dtype=bool)
        first[1:] = self.owner[order][1:] != self.owner[order][:-1]
        pick = order[first]
        return self.paths[pick], pp[pick]

    def response(self, prices: np.ndarray):
        best, lam = self.best_paths(prices)
        x = alpha_fair_rate(self.w, self.alpha, lam, self.cap)
        return best, lam, x

    def soft_dual(self, prices: np.ndarray, cap: np.ndarray, tau: float):
        """Dual with each flow's route minimum replaced by a soft-min at
        temperature ``tau``; returns value and gradient."""
        pp = self.pathset.path_price(prices)[self.paths]
        lo = np.full(len(self.flows), np.inf)
        np.minimum.at(lo, self.owner, pp)
        z = np.exp(-(pp - lo[self.owner]) / tau)
        zsum = np.bincount(self.owner, weights=z, minlength=len(self.flows))
        lam = lo - tau * np.log(zsum)
        x = alpha_fair_rate(self.w, self.alpha, np.maximum(lam, 0.0), self.cap)
        val = self.utility(x) - float(lam @ x) + float(prices @ cap)
        per_var = x[self.owner] * z / zsum[self.owner]
        per_path = np.bincount(self.paths, weights=per_var, minlength=self.pathset.n_paths)
        return val, cap - self.pathset.phi.T @ per_path

    def load(self, best: np.ndarray, x: np.ndarray) -> np.ndarray:
        per_path = np.bincount(best, weights=x, minlength=self.pathset.n_paths)
        return self.pathset.phi.T @ per_path

    def utility(self, x: np.ndarray) -> float:
        return float(np.sum(alpha_fair_value(self.w, self.alpha, x)))


def _dual_and_grad(prices, prob: _Problem, cap: np.ndarray):
    best, lam, x = prob.response(prices)
    val = prob.utility(x) - float(lam @ x) + float(prices @ cap)
    return val, cap - prob.load(best, x)


def _feasible(prob: _Problem, best: np.ndarray, x: np.ndarray, cap: np.ndarray) -> np.ndarray:
    """Scale each flow by the worst overload factor on its path."""
    load = prob.load(best, x)
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = np.where(load > cap, cap / load, 1.0)
    per_path = np.ones(prob.pathset.n_paths)
    ps = prob.pathset
    np.minimum.at(per_path, ps.hop_path, factor[ps.hop_link])
    return x * per_path[best]


def _split(prob: _Problem, lam_p: np.ndarray, x: np.ndarray, prices: np.ndarray,
           cap: np.ndarray, rel_tol: float = 1e-2) -> dict[int, dict[int, float]]:
    """Spread each flow's best-response rate over its near-cheapest paths.

    A linear program keeps every link within capacity and maximizes the
    first-order utility gain (marginal utility times carried rate), so a
    feasible best response is reproduced exactly.
    """
    ps = prob.pathset
    pp = ps.path_price(prices)[prob.paths]
    # prices near zero are solver noise, so ties also get an absolute slack
    # on the scale of the typical positive route price
    pos = lam_p[lam_p > 0]
    slack = rel_tol * float(np.median(pos)) if len(pos) else 0.0
    near = pp <= lam_p[prob.owner] * (1 + rel_tol) + slack + 1e-12
    owner, paths = prob.owner[near], prob.paths[near]
    marg = np.where(x > 0, prob.w * np.maximum(x, 1e-12) ** (-prob.alpha), 0.0)
    gain = marg[owner] + 1e-9
    n = len(owner)
    link_rows = ps.phi[paths].T.tocsr()  # E x n: var crosses link
    flow_rows = sparse.csr_matrix((np.ones(n), (owner, np.arange(n))), shape=(len(x), n))
    res = optimize.linprog(-gain, A_ub=sparse.vstack([link_rows, flow_rows]).tocsc(),
                           b_ub=np.concatenate([cap, x]), bounds=(0, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"rate split failed: {res.message}")
    y = np.maximum(res.x, 0.0)
    rates: dict[int, dict[int, float]] = {f.id: {int(q): 0.0 for q in f.routes} for f in prob.flows}
    for j, p, v in zip(owner, paths, y):
        rates[prob.flows[j].id][int(p)] += float(v)
    return rates


def _refine(prob: _Problem, rates: dict[int, dict[int, float]], prices: np.ndarray,
            cap: np.ndarray, max_iter: int, ceiling: float
            ) -> tuple[dict[int, dict[int, float]], np.ndarray]:
    """Re-solve the rates with each flow's path split held at fixed ratios.

    With fixed ratios a flow's price is the ratio-weighted path price, so
    the dual is smooth and the rates can be found exactly.
    """
    ps = prob.pathset
    owner, paths, share = [], [], []
    best, _ = prob.best_paths(prices)
    for j, f in enumerate(prob.flows):
        r = rates[f.id]
        tot = sum(r.values())
        items = [(p, v / tot) for p, v in r.items() if v > 0] if tot > 0 else [(int(best[j]), 1.0)]
        for p, a in items:
            owner.append(j)
            paths.append(p)
            share.append(a)
    owner, paths, share = np.array(owner), np.array(paths), np.array(share)
    nf = len(prob.flows)

    def respond(lam):
        price = np.bincount(owner, weights=share * ps.path_price(lam)[paths], minlength=nf)
        return price, alpha_fair_rate(prob.w, prob.alpha, price, prob.cap)

    def load(x):
        per_path = np.bincount(paths, weights=x[owner] * share, minlength=ps.n_paths)
        return ps.phi.T @ per_path

    def fun(lam):
        price, x = respond(lam)
        val = prob.utility(x) - float(price @ x) + float(lam @ cap)
        return val / scale, (cap - load(x)) / scale

    scale = max(float(cap.sum()), 1.0)
    lam = optimize.minimize(fun, prices, jac=True, method="L-BFGS-B",
                            bounds=[(0.0, ceiling)] * len(cap),
                            options={"maxiter": max_iter, "ftol": 1e-16, "gtol": 1e-12}).x
    _, x = respond(lam)
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = np.where(load(x) > cap, cap / load(x), 1.0)
    per_path = np.ones(ps.n_paths)
    np.minimum.at(per_path, ps.hop_path, factor[ps.hop_link])
    flow_factor = np.ones(nf)
    np.minimum.at(flow_factor, owner, per_path[paths])
    x = x * flow_factor
    out = {f.id: {int(q): 0.0 for q in f.routes} for f in prob.flows}
    for j, p, a in zip(owner, paths, share):
        out[prob.flows[j].id][int(p)] += float(x[j] * a)
    return out, lam


def _solve(flows, pathset, cap, tol, max_iter, ceiling) -> NumSolution:
    prob = _Problem(flows, pathset)
    E = pathset.network.n_links
    scale = max(float(cap.sum()), 1.0)
    fun = lambda lam: tuple(v / scale for v in _dual_and_grad(lam, prob, cap))
    lam = np.zeros(E)
    if not prob.single:
        # the route minimum makes the dual nonsmooth at ties; anneal a
        # soft-min first and finish with the exact dual
        bounds = [(0.0, ceiling)] * E
        unit = float(np.median(prob.w * prob.cap ** (-prob.alpha)))  # price at the cap
        for tau in unit * np.array([1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6]):
            soft = lambda v, tau=tau: tuple(a / scale for a in prob.soft_dual(v, cap, tau))
            lam = optimize.minimize(soft, lam, jac=True, method="L-BFGS-B", bounds=bounds,
                                    options={"maxiter": max_iter, "ftol": 1e-15,
                                             "gtol": 1e-12}).x
    converged = False
    for _ in range(4 if prob.single else 1):
        if prob.single:
            lam = optimize.minimize(fun, lam, jac=True, method="L-BFGS-B",
                                    bounds=[(0.0, ceiling)] * E,
                                    options={"maxiter": max_iter, "ftol": 1e-16,
                                             "gtol": 1e-12, "maxcor": 30}).x
        best, lam_p, x = prob.response(lam)
        if prob.single:
            x_feas = _feasible(prob, best, x, cap)
            rates = {f.id: {int(p): float(r)} for f, p, r in zip(prob.flows, best, x_feas)}
        else:
            rates, _ = _refine(prob, _split(prob, lam_p, x, lam, cap), lam, cap,
                               max_iter, ceiling)
            x_feas = np.array([sum(rates[f.id].values()) for f in prob.flows])
        U = prob.utility(x_feas)
        dual = _dual_and_grad(lam, prob, cap)[0]
        gap = dual - U
        if gap <= tol * max(abs(U), 1e-12):
            converged = True
            break
    saturated = np.flatnonzero(lam >= ceiling * (1 - 1e-12))
    return NumSolution(rates, lam, U, dual, gap, converged, saturated)


def solve_num(flows: Sequence[Flow], pathset: PathSet, capacities: np.ndarray | None = None,
              tol: float = 1e-4, max_iter: int = 15000,
              ceiling: float = PRICE_CEILING) -> NumSolution:
    """Maximize total utility of routed flows under link capacities.

    The dual is minimized over ``0 <= λ <= ceiling`` with L-BFGS-B; the
    primal is the per-flow best response at the final prices, scaled down
    where needed for feasibility.  ``converged`` reports whether the duality
    gap reached ``tol`` relative to the primal utility.
    """
    if not flows:
        raise ValueError("no flows to allocate")
    cap = pathset.network.capacity if capacities is None else np.asarray(capacities, dtype=float)
    return _solve(flows, pathset, cap, tol, max_iter, ceiling)


def solve_num_with_backlog(flows: Sequence[Flow], pathset: PathSet, backlog: np.ndarray,
                           n: float, capacities: np.ndarray | None = None,
                           tol: float = 1e-4, max_iter: int = 15000,
                           ceiling: float = PRICE_CEILING) -> NumSolution:
    """NUM with each capacity reduced by ``n`` times the upstream-inclusive
    backlog through the link.  Links whose capacity is used up are reported
    in ``saturated_links`` and priced at ``ceiling``."""
    if n < 0 or np.any(np.asarray(backlog) < 0):
        raise ValueError("n and backlogs must be nonnegative")
    cap = pathset.network.capacity if capacities is None else np.asarray(capacities, dtype=float)
    reduced = np.maximum(cap - n * backlog_pressure(np.asarray(backlog, float), pathset), 0.0)
    sol = _solve(flows, pathset, reduced, tol, max_iter, ceiling)
    exhausted = np.flatnonzero(reduced <= 0)
    sol.saturated_links = np.union1d(sol.saturated_links, exhausted)
    return sol


# --- centralized periodic scheme -------------------------------------------------

@dataclass
class PeriodResult:
    rates: dict[int, dict[int, float]]
    messages: int
    prices: np.ndarray | None = None
    solution: NumSolution | None = None


def centralized_period(active: Sequence[Flow], arrived: Sequence[Flow], pathset: PathSet,
                       prices: np.ndarray | None = None) -> PeriodResult:
    """One TE period of the centralized scheme.

    Flows that arrived during the period are routed: delay-sensitive flows
    on their lowest propagation delay candidate, elastic flows on every
    candidate so the solver can place and split them freely.  Then every
    flow is re-solved.  One collect and one configure message per flow.
    """
    E = pathset.network.n_links
    prices = np.zeros(E) if prices is None else prices
    delays = pathset.network.delay
    for f in arrived:
        if f.delay_sensitive:
            p = select_path(f, pathset, prices, delays)
            f.routes = {} if p is None else {p: 0.0}
        else:
            f.routes = {p: 0.0 for p in pathset.candidates(f.src, f.dst)}
    flows = [f for f in list(active) + list(arrived) if f.routes]
    if not flows:
        return PeriodResult({}, 0, prices)
    sol = solve_num(flows, pathset)
    return PeriodResult(sol.rates, 2 * len(flows), sol.prices, sol)


# --- semi-centralized scheme -----------------------------------------------------

@dataclass
class GroupAllocation:
    """Bandwidth preallocated to one (src, dst) group for a period."""

    ds_path: int | None = None
    ds_bandwidth: float = 0.0
    elastic: dict[int, float] = field(default_factory=dict)

    @property
    def elastic_bandwidth(self) -> float:
        return float(sum(self.elastic.values()))


def _bottleneck(pathset: PathSet, p: int, per_link: np.ndarray) -> float:
    return float(per_link[list(pathset.paths[p].links)].min())


def semi_centralized_period(demand: dict[tuple, dict[str, float]], pathset: PathSet
                            ) -> tuple[dict[tuple, GroupAllocation], int]:
    """Preallocate bandwidth to node-pair groups from their demand estimates.

    ``demand[(src, dst)]`` has ``"ds"`` (delay-sensitive) and ``"elastic"``
    estimates in Mbps.  Delay-sensitive demand is pinned to the lowest-delay
    candidate; elastic demand is spread over the candidates in proportion to
    their bottleneck residual capacity.  Both stages scale down on overloaded
    links so the result is feasible.  Returns the allocations and the
    message count (two per group).
    """
    net = pathset.network
    cap = net.capacity
    delays = net.delay
    groups = sorted(demand, key=repr)
    alloc = {g: GroupAllocation() for g in groups}

    ds_load = np.zeros(net.n_links)
    for g in groups:
        cand = pathset.candidates(*g)
        if not cand:
            continue
        cand = np.asarray(cand)
        p = int(cand[np.argmin(pathset.phi[cand] @ delays)])
        alloc[g].ds_path = p
        alloc[g].ds_bandwidth = float(demand[g].get("ds", 0.0))
        ds_load[list(pathset.paths[p].links)] += alloc[g].ds_bandwidth
    with np.errstate(divide="ignore", invalid="ignore"):
        f_ds = np.where(ds_load > cap, cap / ds_load, 1.0)
    residual = cap.copy()
    for g in groups:
        a = alloc[g]
        if a.ds_path is None:
            continue
        a.ds_bandwidth *= _bottleneck(pathset, a.ds_path, f_ds)
        residual[list(pathset.paths[a.ds_path].links)] -= a.ds_bandwidth
    residual = np.maximum(residual, 0.0)

    el_load = np.zeros(net.n_links)
    for g in groups:
        want = float(demand[g].get("elastic", 0.0))
        cand = pathset.candidates(*g)
        if want <= 0 or not cand:
            continue
        room = np.array([_bottleneck(pathset, p, residual) for p in cand])
        if room.sum() <= 0:
            continue
        share = want * room / room.sum()
        for p, b in zip(cand, share):
            if b > 0:
                alloc[g].elastic[p] = float(b)
                el_load[list(pathset.paths[p].links)] += b
    with np.errstate(divide="ignore", invalid="ignore"):
        f_el = np.where(el_load > residual, residual / np.where(el_load > 0, el_load, 1), 1.0)
    for g in groups:
        a = alloc[g]
        a.elastic = {p: b * _bottleneck(pathset, p, f_el) for p, b in a.elastic.items()}
    messages = 2 * sum(1 for g in groups if sum(demand[g].values()) > 0)
    return alloc, messages


def fair_share(caps: Sequence[float], budget: float) -> np.ndarray:
    """Max-min fair split of ``budget`` among flows with rate ceilings."""
    caps = np.asarray(caps, dtype=float)
    out = np.zeros(len(caps))
    if budget <= 0 or len(caps) == 0:
        return out
    order = np.argsort(caps, kind="stable")
    left = float(budget)
    for i, j in enumerate(order):
        fair = left / (len(caps) - i)
        out[j] = min(caps[j], fair)
        left -= out[j]
    return out


def share_group(flows: Sequence[Flow], alloc: GroupAllocation) -> dict[int, dict[int, float]]:
    """Real-time rates inside one group under its preallocation.

    Delay-sensitive classes share the pinned-path budget in strict weight
    order; elastic flows split the elastic budget fairly and spread it over
    paths in the allocation's proportions.
    """
    out: dict[int, dict[int, float]] = {}
    ds = [f for f in flows if f.delay_sensitive]
    el = [f for f in flows if not f.delay_sensitive]
    left = alloc.ds_bandwidth
    for w in sorted({f.cls.weight for f in ds}, reverse=True):
        members = [f for f in ds if f.cls.weight == w]
        rates = fair_share([f.cap for f in members], left)
        left -= float(rates.sum())
        for f, r in zip(members, rates):
            out[f.id] = {alloc.ds_path: float(r)} if alloc.ds_path is not None else {}
    total = alloc.elastic_bandwidth
    if el:
        left = total
        for w in sorted({f.cls.weight for f in el}, reverse=True):
            members = [f for f in el if f.cls.weight == w]
            rates = fair_share([f.cap for f in members], left)
            left -= float(rates.sum())
            for f, r in zip(members, rates):
                out[f.id] = {p: float(r) * b / total for p, b in alloc.elastic.items()} if total > 0 else {}
    return out


# --- theoretical optimum -----------------------------------------------------------

@dataclass
class OptimumSample:
    time: float
    flows: int
    utility: float  # achieved by a feasible allocation
    bound: float  # dual upper bound


def present_flows(trace: Sequence[Flow], t0: float, t1: float) -> list[Flow]:
    """Flows that have arrived before ``t1`` and are still alive at ``t0``."""
    return [f for f in trace if f.arrival < t1 and f.end > t0]


def theoretical_optimum(trace: Sequence[Flow], pathset: PathSet, times: Sequence[float],
                        tick: float, tol: float = 1e-4) -> list[OptimumSample]:
    """Best total utility for the flows present at each tick start in ``times``.

    Every flow may use and split over all of its candidate paths, so this
    upper-bounds any single-path allocation of the same flows.  Flow
    membership follows the engine's tick convention: a flow counts at tick
    ``[t, t + tick)`` if it arrived before ``t + tick`` and ends after ``t``.
    """
    out = []
    for t in times:
        flows = []
        for f in present_flows(trace, t, t + tick - 1e-9):
            cand = pathset.candidates(f.src, f.dst)
            if cand:
                g = f.copy()
                g.routes = {p: 0.0 for p in cand}
                flows.append(g)
        if not flows:
            out.append(OptimumSample(float(t), 0, 0.0, 0.0))
            continue
        sol = solve_num(flows, pathset, tol=tol)
        out.append(OptimumSample(float(t), len(flows), sol.utility, sol.dual))
    return out
