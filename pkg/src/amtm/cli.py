"""Experiment runner: JSON configs in, plot-ready CSV files out.

``amtm-sim convergence|n-sweep|compare|single --config FILE --seed N --out DIR``

Settings resolve in order: built-in defaults, per-experiment defaults, the
config file, then command-line flags.  Every CSV written here has its
columns listed in the bundled ``csv_schema.json``.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import metrics
from .baselines import solve_num, solve_num_with_backlog, theoretical_optimum
from .engine import (ConfigError, SimConfig, Simulation, generate_trace, replay_flow_trace,
                     resolve_pathset, with_scheme)
from .metrics import AMTM, CENTRALIZED, SEMI_CENTRALIZED, SimReport
from .pricing import PriceUpdateConfig
from .traffic import class_from_dict

KINDS = ("convergence", "n-sweep", "compare", "single")

# per-period ordering is checked against the oracle's optimality tolerance
ORDER_RTOL = 1e-4

_SIM_FIELDS = {f.name for f in fields(SimConfig)}
_PRICING_FIELDS = {f.name for f in fields(PriceUpdateConfig)}


@dataclass(frozen=True)
class RunConfig:
    """One experiment: a base simulation config plus experiment settings.

    Convergence runs a stationary variant (``stationary_count`` never-ending
    flows, no arrivals) and a dynamic one at ``dynamic_intensity``; both
    track ``sampled_links`` random links and evaluate the price oracles every
    ``oracle_every`` seconds.  The n sweep runs one fixed-gain simulation per
    ``n_grid`` entry plus an adaptive run.  Compare replays one trace per
    entry of ``intensities`` through every scheme for ``periods`` TE periods
    and samples the optimum every ``oracle_every`` seconds.
    """

    kind: str
    sim: SimConfig
    out: Path = Path("out")
    workers: int = 1
    sampled_links: int = 20
    oracle_every: float = 1.0
    stationary_count: int = 10_000
    stationary_duration: float = 60.0
    dynamic_intensity: float = 30.0
    dynamic_duration: float = 100.0
    n_grid: tuple[float, ...] = (1e-6, 3e-6, 1e-5, 3e-5, 1e-4)
    adaptive_n0: float = 0.0
    adaptive_epsilon: float = 1e-5
    adaptive_duration: float = 120.0
    intensities: tuple[float, ...] = (10.0, 20.0, 30.0, 50.0)
    periods: int = 10

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if self.kind == "n-sweep" and not self.n_grid:
            raise ConfigError("n grid must be nonempty")
        if self.kind == "compare" and not self.intensities:
            raise ConfigError("intensity grid must be nonempty")
        if self.periods < 1:
            raise ConfigError("periods must be at least 1")
        if not self.oracle_every > 0:
            raise ConfigError("oracle interval must be positive")


_KIND_DEFAULTS: dict[str, dict[str, Any]] = {
    "convergence": {},
    "n-sweep": {"intensity": 30.0, "preload": True, "warmup": 10.0, "duration": 50.0},
    "compare": {"preload": True, "warmup": 20.0},
    "single": {"preload": True},
}


def build_config(kind: str, values: dict[str, Any]) -> RunConfig:
    """Assemble a RunConfig from flat settings (config-file field names)."""
    values = dict(values)
    named = values.pop("kind", kind)
    if named != kind:
        raise ConfigError(f"config is for {named!r}, not {kind!r}")
    merged = {**_KIND_DEFAULTS.get(kind, {}), **values}
    sim_kw: dict[str, Any] = {}
    run_kw: dict[str, Any] = {}
    run_names = {f.name for f in fields(RunConfig)} - {"kind", "sim"}
    for k, v in merged.items():
        if k == "pricing":
            unknown = set(v) - _PRICING_FIELDS
            if unknown:
                raise ConfigError(f"unknown pricing settings {sorted(unknown)}")
            sim_kw["pricing"] = PriceUpdateConfig(**v)
        elif k == "classes":
            sim_kw["classes"] = tuple(class_from_dict(c) for c in v)
        elif k in _SIM_FIELDS:
            sim_kw[k] = v
        elif k in run_names:
            run_kw[k] = v
        else:
            raise ConfigError(f"unknown setting {k!r}")
    for k in ("n_grid", "intensities"):
        if k in run_kw:
            run_kw[k] = tuple(float(x) for x in run_kw[k])
    if "out" in run_kw:
        run_kw["out"] = Path(run_kw["out"])
    if kind == "compare":
        period = sim_kw.get("te_period", SimConfig.te_period)
        sim_kw["duration"] = run_kw.get("periods", RunConfig.periods) * period
    try:
        sim = SimConfig(**sim_kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    return RunConfig(kind=kind, sim=sim, **run_kw)


# --- CSV output ---------------------------------------------------------------------

def csv_schema() -> dict[str, dict[str, str]]:
    text = resources.files("amtm").joinpath("data/csv_schema.json").read_text()
    return json.loads(text)["files"]


def write_csv(out: Path, name: str, rows: Sequence[dict[str, Any]]) -> Path:
    """Write rows under ``out/name`` with the schema's column order."""
    columns = list(csv_schema()[name])
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            extra = set(r) - set(columns)
            if extra:
                raise KeyError(f"{name}: columns {sorted(extra)} not in schema")
            w.writerow({k: _fmt(r.get(k, "")) for k in columns})
    return path


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (np.floating, float)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def _map(fn: Callable, items: Sequence, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


# --- convergence ----------------------------------------------------------------------

@dataclass
class ConvergenceResult:
    variant: str
    report: SimReport
    links: np.ndarray  # sampled link ids
    oracle_times: np.ndarray
    target: np.ndarray  # (T, E) backlog-aware optimum prices
    optimum: np.ndarray  # (T, E) optimum prices of the flows present

    def final_error(self) -> float:
        """Relative price error at the last sample against the last optimum."""
        ref = self.optimum[-1]
        norm = np.linalg.norm(ref)
        lam = self.report.prices[-1]
        return float(np.linalg.norm(lam - ref) / norm) if norm > 0 else float(np.linalg.norm(lam))


class _Snapshots:
    """Observer that keeps flow sets and hop backlogs at oracle instants."""

    def __init__(self, every: float, tick: float):
        self.every = max(1, int(round(every / tick)))
        self.tick = tick
        self.times: list[float] = []
        self.flows: list[list] = []
        self.backlog: list[np.ndarray] = []

    def __call__(self, sim: Simulation) -> None:
        k = int(round(sim.state.clock / self.tick))
        if k % self.every and self.times:
            return
        self.times.append(sim.state.clock)
        self.flows.append([f.copy() for f in sim.active_flows()])
        self.backlog.append(sim.state.queues.total_backlog().copy())


def convergence_run(cfg: SimConfig, variant: str, sampled_links: int = 20,
                    oracle_every: float = 1.0) -> ConvergenceResult:
    """Run AMTM and evaluate the centralized price oracles along the way."""
    ps = resolve_pathset(cfg)
    obs = _Snapshots(oracle_every, cfg.tick)
    report = replay_flow_trace(cfg, generate_trace(cfg, ps), ps, observer=obs)
    E = ps.network.n_links
    rng = np.random.default_rng(cfg.seed)
    links = np.sort(rng.choice(E, size=min(sampled_links, E), replace=False))
    pc = cfg.pricing
    gain = pc.n / pc.mu  # the deep update is stationary where load = C - (n/mu) * pressure
    target, optimum = [], []
    for flows, back in zip(obs.flows, obs.backlog):
        if not flows:
            target.append(np.zeros(E))
            optimum.append(np.zeros(E))
            continue
        optimum.append(solve_num(flows, ps).prices)
        target.append(solve_num_with_backlog(flows, ps, back, gain).prices)
    return ConvergenceResult(variant, report, links, np.array(obs.times),
                             np.array(target).reshape(-1, E), np.array(optimum).reshape(-1, E))


def convergence_configs(rc: RunConfig) -> dict[str, SimConfig]:
    base = rc.sim
    fixed = replace(base.pricing, adaptive=False)
    return {
        "stationary": replace(base, intensity=0.0, preload=False, warmup=0.0,
                              stationary_flows=rc.stationary_count,
                              duration=rc.stationary_duration, pricing=fixed),
        "dynamic": replace(base, intensity=rc.dynamic_intensity, preload=True, warmup=0.0,
                           stationary_flows=0, duration=rc.dynamic_duration, pricing=fixed),
    }


def _convergence_rows(res: ConvergenceResult) -> tuple[list, list, list]:
    rep = res.report
    price_rows, backlog_rows = [], []
    oi = np.searchsorted(res.oracle_times, rep.sample_times, side="right") - 1
    for i, t in enumerate(rep.sample_times):
        j = oi[i]
        for e in res.links:
            price_rows.append({
                "variant": res.variant, "time": t, "link": int(e), "price": rep.prices[i, e],
                "target": res.target[j, e] if j >= 0 else "",
                "optimum": res.optimum[j, e] if j >= 0 else ""})
            backlog_rows.append({"variant": res.variant, "time": t, "link": int(e),
                                 "backlog": rep.link_backlog[i, e]})
    err_rows = []
    si = np.searchsorted(rep.sample_times, res.oracle_times - 1e-9)
    for j, t in enumerate(res.oracle_times):
        i = si[j]
        if i >= len(rep.sample_times):
            continue
        ref = res.optimum[j]
        norm = np.linalg.norm(ref)
        lam = rep.prices[i]
        err = np.linalg.norm(lam - ref) / norm if norm > 0 else np.linalg.norm(lam)
        err_rows.append({"variant": res.variant, "time": t, "relative_error": err,
                         "target_gap": np.linalg.norm(lam - res.target[j]),
                         "max_link_backlog": rep.link_backlog[i].max(),
                         "total_backlog": rep.link_backlog[i].sum()})
    return price_rows, backlog_rows, err_rows


def cmd_convergence(rc: RunConfig) -> dict[str, ConvergenceResult]:
    cfgs = convergence_configs(rc)
    results = _map(_convergence_point, [(v, c, rc.sampled_links, rc.oracle_every)
                                        for v, c in cfgs.items()], rc.workers)
    prices, backlogs, errors = [], [], []
    for res in results:
        p, b, e = _convergence_rows(res)
        prices += p
        backlogs += b
        errors += e
    write_csv(rc.out, "convergence_prices.csv", prices)
    write_csv(rc.out, "convergence_backlog.csv", backlogs)
    write_csv(rc.out, "convergence_error.csv", errors)
    return {r.variant: r for r in results}


def _convergence_point(args) -> ConvergenceResult:
    variant, cfg, links, every = args
    return convergence_run(cfg, variant, links, every)


# --- n sweep ----------------------------------------------------------------------------

def mean_queue_time(report: SimReport) -> float:
    """Average of the controller's queueing-time estimate over the measured window."""
    m = report.nipu_times >= report.measure_start - 1e-9
    return float(report.wbar_trace[m].mean()) if m.any() else 0.0


def sweep_configs(rc: RunConfig) -> list[SimConfig]:
    return [replace(rc.sim, pricing=replace(rc.sim.pricing, n=float(n), adaptive=False))
            for n in rc.n_grid]


def adaptive_config(rc: RunConfig) -> SimConfig:
    pc = replace(rc.sim.pricing, n=rc.adaptive_n0, epsilon=rc.adaptive_epsilon, adaptive=True)
    return replace(rc.sim, pricing=pc, warmup=0.0, duration=rc.adaptive_duration)


def monotone_violations(values: Sequence[float]) -> int:
    """Adjacent pairs where a nonincreasing sequence goes up."""
    v = np.asarray(values, float)
    return int(np.sum(np.diff(v) > 0))


def cmd_n_sweep(rc: RunConfig) -> dict[str, Any]:
    cfgs = sweep_configs(rc) + [adaptive_config(rc)]
    reports = _map(run_config, cfgs, rc.workers)
    fixed, adaptive = reports[:-1], reports[-1]
    W = [mean_queue_time(r) for r in fixed]
    U = [metrics.cumulative_utility(r) for r in fixed]
    w_bad, u_bad = monotone_violations(W), monotone_violations(U)
    rows = [{"n": n, "mean_queue_time": w, "total_utility": u, "mean_utility": metrics.mean_utility(r),
             "queue_time_violations": w_bad, "utility_violations": u_bad,
             "monotone_pass": w_bad == 0 and u_bad <= 1}
            for n, w, u, r in zip(rc.n_grid, W, U, fixed)]
    write_csv(rc.out, "n_sweep.csv", rows)
    k = len(adaptive.nipu_times)
    tail = adaptive.wbar_trace[3 * k // 4:]
    w_star = rc.sim.pricing.w_star
    terminal = float(tail.mean()) if len(tail) else 0.0
    write_csv(rc.out, "n_adaptive.csv", [
        {"time": t, "n": n, "mean_queue_time": w}
        for t, n, w in zip(adaptive.nipu_times, adaptive.n_trace, adaptive.wbar_trace)])
    write_csv(rc.out, "n_adaptive_summary.csv", [{
        "w_star": w_star, "terminal_mean_queue_time": terminal, "final_n": adaptive.n_trace[-1],
        "in_band": 0.5 * w_star <= terminal <= 1.5 * w_star}])
    return {"fixed": fixed, "adaptive": adaptive, "queue_time": W, "utility": U,
            "terminal_queue_time": terminal}


# --- scheme comparison ----------------------------------------------------------------------

@dataclass
class ComparePoint:
    intensity: float
    reports: dict[str, SimReport]
    sample_ticks: np.ndarray
    optimum: np.ndarray  # feasible utility at each sample tick
    bound: np.ndarray  # dual upper bound at each sample tick
    flows: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def period_table(self) -> list[dict[str, Any]]:
        """Per measured period: sampled and integrated utility of each scheme."""
        a = self.reports[AMTM]
        T = a.te_period
        dt = a.tick
        start = a.measure_start
        per_tick = int(round(T / dt))
        rows = []
        for i, p0 in enumerate(a.period_starts):
            if p0 < start - 1e-9:
                continue
            k0 = int(round(p0 / dt))
            m = (self.sample_ticks >= k0) & (self.sample_ticks < k0 + per_tick)
            ks = self.sample_ticks[m]
            amtm_s = float(a.utility[ks].mean())
            semi_s = float(self.reports[SEMI_CENTRALIZED].utility[ks].mean())
            opt = float(self.optimum[m].mean())
            bound = float(self.bound[m].mean())
            ai = float(a.period_utility[i])
            si = float(self.reports[SEMI_CENTRALIZED].period_utility[i])
            rows.append({
                "intensity": self.intensity, "period": i, "start": p0, "samples": int(m.sum()),
                "centralized": opt, "centralized_bound": bound, "amtm": amtm_s,
                "semi_centralized": semi_s,
                "centralized_realized": float(self.reports[CENTRALIZED].utility[ks].mean()),
                "amtm_integral": ai, "semi_centralized_integral": si,
                "centralized_realized_integral": float(self.reports[CENTRALIZED].period_utility[i]),
                "centralized_ge_amtm": bool(amtm_s <= bound * (1 + ORDER_RTOL)),
                "amtm_ge_semi_centralized": bool(ai >= si)})
        return rows


def compare_point(cfg: SimConfig, oracle_every: float = 1.0) -> ComparePoint:
    """Replay one trace through every scheme and sample the optimum."""
    ps = resolve_pathset(cfg)
    trace = generate_trace(cfg, ps)
    reports = {s: replay_flow_trace(with_scheme(cfg, s), trace, ps)
               for s in (AMTM, CENTRALIZED, SEMI_CENTRALIZED)}
    every = max(1, int(round(oracle_every / cfg.tick)))
    k0 = int(round(cfg.warmup / cfg.tick))
    n_ticks = int(round(cfg.horizon / cfg.tick))
    ticks = np.arange(k0, n_ticks, every)
    samples = theoretical_optimum(trace, ps, ticks * cfg.tick, cfg.tick)
    return ComparePoint(cfg.intensity, reports, ticks,
                        np.array([s.utility for s in samples]),
                        np.array([s.bound for s in samples]),
                        np.array([s.flows for s in samples]))


def _compare_point(args) -> ComparePoint:
    return compare_point(*args)


def _scheme_row(point: ComparePoint, scheme: str) -> dict[str, Any]:
    r = point.reports[scheme]
    _, util = metrics.link_utilization(r)
    row = {"intensity": point.intensity, "scheme": scheme, "utilization": util,
           "mean_utility": metrics.mean_utility(r),
           "cumulative_utility": metrics.cumulative_utility(r),
           "sampled_utility": float(r.utility[point.sample_ticks].mean()),
           "mean_active_flows": float(r.active_flows[point.sample_ticks].mean()),
           "messages_per_period": float(metrics.messages_per_period(r).mean()),
           "messages_per_round": float(r.round_messages.mean()) if len(r.round_messages) else 0.0,
           "overflow_mbit": r.overflow_mbit}
    for prefix, ds in (("delay", False), ("ds_delay", True)):
        try:
            st = metrics.queueing_delay_stats(r, delay_sensitive_only=ds)
        except ValueError:
            continue
        for k in ("mean", "p50", "p95", "p99"):
            row[f"{prefix}_{k}"] = st[k]
    wait = metrics.admission_wait(r)
    row["admission_wait_mean"] = float(wait.mean()) if len(wait) else 0.0
    return row


def compare_configs(rc: RunConfig) -> list[SimConfig]:
    return [replace(rc.sim, intensity=float(lam), scheme=AMTM) for lam in rc.intensities]


def cmd_compare(rc: RunConfig) -> list[ComparePoint]:
    points = _map(_compare_point, [(c, rc.oracle_every) for c in compare_configs(rc)],
                  rc.workers)
    rows, periods = [], []
    for p in points:
        rows += [_scheme_row(p, s) for s in (AMTM, CENTRALIZED, SEMI_CENTRALIZED)]
        rows.append({"intensity": p.intensity, "scheme": "optimum",
                     "sampled_utility": float(p.optimum.mean()),
                     "mean_active_flows": float(p.flows.mean())})
        periods += p.period_table()
    write_csv(rc.out, "compare.csv", rows)
    write_csv(rc.out, "compare_periods.csv", periods)
    return points


# --- single run -------------------------------------------------------------------------

def run_config(cfg: SimConfig) -> SimReport:
    ps = resolve_pathset(cfg)
    return replay_flow_trace(cfg, generate_trace(cfg, ps), ps)


def cmd_single(rc: RunConfig) -> SimReport:
    r = run_config(rc.sim)
    every = max(1, int(round(r.sample_interval / r.tick)))
    idx = np.arange(every - 1, len(r.tick_times), every)
    write_csv(rc.out, "single_ticks.csv", [
        {"time": r.tick_times[k], "utility": r.utility[k], "active_flows": r.active_flows[k],
         "total_backlog": r.total_backlog[k]} for k in idx])
    write_csv(rc.out, "single_links.csv", [
        {"time": t, "link": e, "price": r.prices[i, e], "backlog": r.link_backlog[i, e],
         "served": r.served[i, e]}
        for i, t in enumerate(r.sample_times) for e in range(r.n_links)])
    write_csv(rc.out, "single_periods.csv", [
        {"start": s, "utility": u, "messages": m, "active_flows": n}
        for s, u, m, n in zip(r.period_starts, r.period_utility, r.period_messages,
                              r.period_active_flows)])
    write_csv(rc.out, "single_flows.csv", [
        {k: rec[k].item() for k in rec.dtype.names} for rec in r.flows])
    write_csv(rc.out, "single_nipu.csv", [
        {"time": t, "n": n, "mean_queue_time": w}
        for t, n, w in zip(r.nipu_times, r.n_trace, r.wbar_trace)])
    return r


COMMANDS = {"convergence": cmd_convergence, "n-sweep": cmd_n_sweep,
            "compare": cmd_compare, "single": cmd_single}


# --- entry point --------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="amtm-sim", description=__doc__.splitlines()[0])
    ap.add_argument("kind", choices=KINDS)
    ap.add_argument("--config", type=Path, help="JSON file with settings")
    ap.add_argument("--seed", type=int, help="unsigned 64-bit seed")
    ap.add_argument("--out", type=Path, help="output directory")
    ap.add_argument("--workers", type=int, help="parallel sweep points")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=JSON",
                    help="override one setting, e.g. --set intensity=50")
    return ap


def parse_settings(args: argparse.Namespace) -> dict[str, Any]:
    values: dict[str, Any] = {}
    if args.config is not None:
        values.update(json.loads(args.config.read_text()))
    for item in args.set:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            values[key] = json.loads(raw)
        except json.JSONDecodeError:
            values[key] = raw
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        values["seed"] = args.seed
    if args.out is not None:
        values["out"] = str(args.out)
    if args.workers is not None:
        values["workers"] = args.workers
    return values


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        values = parse_settings(args)
        if args.kind == "compare" and "seed" not in values:
            raise ConfigError("compare runs need an explicit --seed")
        rc = build_config(args.kind, values)
    except (ConfigError, OSError, json.JSONDecodeError) as e:
        print(f"amtm-sim: {e}", file=sys.stderr)
        return 2
    rc.out.mkdir(parents=True, exist_ok=True)
    (rc.out / "config.json").write_text(json.dumps(config_document(rc), indent=2) + "\n")
    COMMANDS[rc.kind](rc)
    return 0


def config_document(rc: RunConfig) -> dict[str, Any]:
    """The fully resolved settings, in config-file form."""
    sim = asdict(rc.sim)
    sim["classes"] = [
        {"name": c.name, "peak_rate": c.peak_rate, "qos": c.qos,
         "duration_range": list(c.duration_range), "weight": c.weight,
         "probability": c.probability} for c in rc.sim.classes]
    if rc.sim.topology is not None and not isinstance(rc.sim.topology, (str, Path)):
        sim["topology"] = repr(rc.sim.topology)
    elif rc.sim.topology is not None:
        sim["topology"] = str(rc.sim.topology)
    doc = {"kind": rc.kind, **sim}
    for f in fields(RunConfig):
        if f.name not in ("kind", "sim"):
            v = getattr(rc, f.name)
            doc[f.name] = str(v) if isinstance(v, Path) else (list(v) if isinstance(v, tuple) else v)
    return doc


if __name__ == "__main__":
    raise SystemExit(main())
