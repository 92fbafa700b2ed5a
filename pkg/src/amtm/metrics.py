"""Simulation report container and the evaluation metrics computed from it."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .traffic import Flow

AMTM = "amtm"
CENTRALIZED = "centralized"
SEMI_CENTRALIZED = "semi-centralized"
SCHEMES = (AMTM, CENTRALIZED, SEMI_CENTRALIZED)

FLOW_RECORD_DTYPE = np.dtype([
    ("id", np.int64), ("cls", "U32"), ("delay_sensitive", bool),
    ("arrival", float), ("admitted", float), ("end", float),
    ("mean_rate", float), ("queue_delay", float),
])


@dataclass
class SimReport:
    """Time series produced by one engine run.

    Tick series cover every tick; link-level series are sampled every
    ``sample_interval``; period series are per TE period.  ``served`` is the
    mean served rate over each sample interval.  ``round_messages`` holds
    the message count of each control round (a price update for AMTM, a
    period boundary for the baselines).
    """

    scheme: str
    n_nodes: int
    n_links: int
    capacity: np.ndarray
    tick: float
    measure_start: float
    sample_interval: float
    te_period: float
    tick_times: np.ndarray
    utility: np.ndarray
    active_flows: np.ndarray
    total_backlog: np.ndarray
    sample_times: np.ndarray
    prices: np.ndarray
    link_backlog: np.ndarray
    served: np.ndarray
    nipu_times: np.ndarray
    n_trace: np.ndarray
    wbar_trace: np.ndarray
    period_starts: np.ndarray
    period_utility: np.ndarray
    period_messages: np.ndarray
    period_active_flows: np.ndarray
    flows: np.ndarray
    overflow_mbit: float
    round_times: np.ndarray
    round_messages: np.ndarray
    hop_backlog: np.ndarray | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    def window(self, times: np.ndarray, t0: float | None, t1: float | None) -> np.ndarray:
        t0 = self.measure_start if t0 is None else t0
        t1 = np.inf if t1 is None else t1
        return (times >= t0 - 1e-12) & (times < t1 - 1e-12)

    def measured_periods(self) -> np.ndarray:
        return self.period_starts >= self.measure_start - 1e-9

    def equals(self, other: "SimReport") -> bool:
        """Bitwise equality of every array and scalar field."""
        for name in self.__dataclass_fields__:
            a, b = getattr(self, name), getattr(other, name)
            if name == "extra":
                continue
            if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
                if a is None or b is None or a.shape != b.shape or a.dtype != b.dtype:
                    return False
                if a.dtype.names:
                    if not all(np.array_equal(a[k], b[k]) for k in a.dtype.names):
                        return False
                elif not np.array_equal(a, b, equal_nan=True):
                    return False
            elif a != b:
                return False
        return True


def link_utilization(report: SimReport, t0: float | None = None,
                     t1: float | None = None) -> tuple[np.ndarray, float]:
    """Time-averaged served rate over capacity, per link and mean over links."""
    m = report.window(report.sample_times, t0, t1)
    if not m.any():
        raise ValueError("empty window")
    per_link = report.served[m].mean(axis=0) / report.capacity
    return per_link, float(per_link.mean())


def network_utility(flows: Sequence[Flow]) -> float:
    """Sum of flow utilities at their current total rates."""
    return float(sum(f.utility.value(f.rate) for f in flows))


def utility_series(report: SimReport, t0: float | None = None,
                   t1: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    m = report.window(report.tick_times, t0, t1)
    return report.tick_times[m], report.utility[m]


def period_utility(report: SimReport) -> np.ndarray:
    """Utility integrated over each measured TE period (utility x seconds)."""
    return report.period_utility[report.measured_periods()]


def cumulative_utility(report: SimReport, t0: float | None = None,
                       t1: float | None = None) -> float:
    """Utility integrated over the measured window (utility x seconds)."""
    _, u = utility_series(report, t0, t1)
    return float(u.sum() * report.tick)


def mean_utility(report: SimReport) -> float:
    """Time-averaged network utility over the measured window."""
    _, u = utility_series(report)
    return float(u.mean()) if len(u) else 0.0


def queueing_delay_stats(report: SimReport, classes: Sequence[str] | None = None,
                         delay_sensitive_only: bool = False,
                         percentiles: Sequence[float] = (50, 95, 99)) -> dict[str, float]:
    """Mean and percentiles of per-flow queueing delay (seconds).

    Only flows admitted inside the measured window count.
    """
    rec = report.flows
    m = rec["admitted"] >= report.measure_start - 1e-9
    if classes is not None:
        m &= np.isin(rec["cls"], list(classes))
    if delay_sensitive_only:
        m &= rec["delay_sensitive"]
    d = rec["queue_delay"][m]
    if len(d) == 0:
        raise ValueError("no completed flows in selection")
    out = {"count": float(len(d)), "mean": float(d.mean())}
    for q in percentiles:
        out[f"p{int(q)}"] = float(np.percentile(d, q))
    return out


def admission_wait(report: SimReport) -> np.ndarray:
    rec = report.flows
    m = rec["arrival"] >= report.measure_start - 1e-9
    return rec["admitted"][m] - rec["arrival"][m]


def control_message_scale(scheme: str, n_nodes: int = 0, n_links: int = 0,
                          n_flows: int = 0, n_groups: int = 0) -> int:
    """Messages per control round: per price update for AMTM, per TE period
    for the periodic schemes."""
    if scheme == AMTM:
        return n_nodes + n_links
    if scheme == CENTRALIZED:
        return 2 * n_flows
    if scheme == SEMI_CENTRALIZED:
        return 2 * n_groups
    raise ValueError(f"unknown scheme {scheme!r}")


def messages_per_period(report: SimReport) -> np.ndarray:
    return report.period_messages[report.measured_periods()]


def trend(times: np.ndarray, values: np.ndarray, batches: int | None = None
          ) -> tuple[float, float]:
    """Least-squares slope and its standard error.

    With ``batches`` the series is first reduced to that many contiguous
    batch means, which keeps the error honest for autocorrelated series.
    """
    t = np.asarray(times, float)
    y = np.asarray(values, float)
    if batches is not None:
        if batches < 3 or len(t) < batches:
            raise ValueError("need at least three batches of one point each")
        t = np.array([c.mean() for c in np.array_split(t, batches)])
        y = np.array([c.mean() for c in np.array_split(y, batches)])
    if len(t) < 3:
        raise ValueError("need at least three points")
    tc = t - t.mean()
    sxx = float(tc @ tc)
    slope = float(tc @ (y - y.mean())) / sxx
    resid = y - y.mean() - slope * tc
    se = float(np.sqrt(resid @ resid / (len(t) - 2) / sxx))
    return slope, se
