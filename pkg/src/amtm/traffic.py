"""Traffic classes, utility functions and the Poisson flow generator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np

DELAY_SENSITIVE = "delay-sensitive"
DELAY_TOLERANT = "delay-tolerant"
DEFAULT_ALPHA = 0.5


@dataclass(frozen=True)
class TrafficClass:
    name: str
    peak_rate: float  # Mbps, also the per-flow demand ceiling
    qos: str
    duration_range: tuple[float, float]  # seconds
    weight: float
    probability: float

    def __post_init__(self):
        if self.qos not in (DELAY_SENSITIVE, DELAY_TOLERANT):
            raise ValueError(f"unknown qos kind {self.qos!r}")
        if not self.weight > 0:
            raise ValueError("class weight must be positive")
        if not self.peak_rate > 0:
            raise ValueError("peak rate must be positive")
        lo, hi = self.duration_range
        if not 0 <= lo <= hi:
            raise ValueError("duration range must satisfy 0 <= min <= max")
        if not 0 <= self.probability <= 1:
            raise ValueError("generation probability outside [0, 1]")

    @property
    def delay_sensitive(self) -> bool:
        return self.qos == DELAY_SENSITIVE

    @property
    def mean_duration(self) -> float:
        return 0.5 * sum(self.duration_range)


DEFAULT_CLASSES: tuple[TrafficClass, ...] = (
    TrafficClass("interactive", 10.0, DELAY_SENSITIVE, (10.0, 30.0), 3.0, 0.86),
    TrafficClass("multimedia", 20.0, DELAY_SENSITIVE, (60.0, 300.0), 2.0, 0.07),
    TrafficClass("elastic", 100.0, DELAY_TOLERANT, (10.0, 600.0), 1.0, 0.07),
)


def check_class_table(classes: Sequence[TrafficClass]) -> None:
    if not classes:
        raise ValueError("empty class table")
    total = sum(c.probability for c in classes)
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"class probabilities sum to {total}, not 1")
    if len({c.name for c in classes}) != len(classes):
        raise ValueError("duplicate class names")


def class_from_dict(d: dict) -> TrafficClass:
    return TrafficClass(
        name=d["name"], peak_rate=float(d["peak_rate"]), qos=d["qos"],
        duration_range=(float(d["duration_range"][0]), float(d["duration_range"][1])),
        weight=float(d["weight"]), probability=float(d["probability"]))


def traffic_ratio(classes: Sequence[TrafficClass] = DEFAULT_CLASSES) -> dict[str, float]:
    """Share of offered volume per class (peak rate x probability x mean duration)."""
    vol = {c.name: c.peak_rate * c.probability * c.mean_duration for c in classes}
    total = sum(vol.values())
    return {k: v / total for k, v in vol.items()}


# --- utilities ------------------------------------------------------------------

class Utility:
    """Concave increasing utility of a flow's total rate.

    Subclasses provide ``value`` and ``inverse_marginal`` (the rate at which
    the marginal utility equals a given price); the price-taking rate
    follows from those.
    """

    def value(self, x):
        raise NotImplementedError

    def inverse_marginal(self, price):
        raise NotImplementedError

    def optimal_rate(self, price: float, cap: float = math.inf) -> float:
        """argmax over 0 <= x <= cap of value(x) - price * x."""
        if price <= 0:
            return cap
        return min(cap, self.inverse_marginal(price))


@dataclass(frozen=True)
class AlphaFair(Utility):
    """``w / (1 - alpha) * x ** (1 - alpha)``, for alpha >= 0 and alpha != 1."""

    weight: float = 1.0
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        if not self.weight > 0:
            raise ValueError("weight must be positive")
        if not self.alpha >= 0 or self.alpha == 1:
            raise ValueError("alpha must be nonnegative and different from 1")

    def value(self, x):
        return alpha_fair_value(self.weight, self.alpha, x)

    def inverse_marginal(self, price):
        if self.alpha == 0:
            return math.inf if price < self.weight else 0.0
        return (self.weight / price) ** (1.0 / self.alpha)


def alpha_fair_value(w, alpha, x):
    """Vectorized alpha-fair utility; rejects negative rates."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("rate must be nonnegative")
    out = np.asarray(w, dtype=float) / (1.0 - np.asarray(alpha)) * x ** (1.0 - np.asarray(alpha))
    return float(out) if out.ndim == 0 else out


def alpha_fair_rate(w, alpha, price, cap):
    """Vectorized price-taking rate ``min(cap, (w / price) ** (1 / alpha))``.

    A zero price returns the cap.
    """
    w = np.asarray(w, dtype=float)
    price = np.asarray(price, dtype=float)
    cap = np.asarray(cap, dtype=float)
    with np.errstate(divide="ignore", over="ignore"):
        raw = (w / price) ** (1.0 / np.asarray(alpha, dtype=float))
    return np.where(price > 0, np.minimum(cap, raw), cap)


def utility_value(u: Utility, x: float) -> float:
    if x < 0:
        raise ValueError("rate must be nonnegative")
    return float(u.value(x))


def optimal_rate(u: Utility, path_price: float, cap: float = math.inf) -> float:
    if path_price < 0:
        raise ValueError("path price must be nonnegative")
    if not cap > 0:
        raise ValueError("cap must be positive")
    return float(u.optimal_rate(path_price, cap))


# --- flows ------------------------------------------------------------------------

@dataclass
class Flow:
    """One demand; ``routes`` maps each selected path id to its metered rate."""

    id: int
    cls: TrafficClass
    src: Hashable
    dst: Hashable
    arrival: float
    duration: float
    utility: Utility | None = None
    routes: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.utility is None:
            self.utility = AlphaFair(self.cls.weight, DEFAULT_ALPHA)

    @property
    def delay_sensitive(self) -> bool:
        return self.cls.delay_sensitive

    @property
    def cap(self) -> float:
        return self.cls.peak_rate

    @property
    def rate(self) -> float:
        return float(sum(self.routes.values()))

    @property
    def end(self) -> float:
        return self.arrival + self.duration

    def theta(self, n_paths: int) -> np.ndarray:
        out = np.zeros(n_paths)
        out[list(self.routes)] = 1.0
        return out

    def copy(self) -> "Flow":
        return Flow(self.id, self.cls, self.src, self.dst, self.arrival,
                    self.duration, self.utility, dict(self.routes))


class FlowGenerator:
    """Poisson arrivals with class, duration and node pair drawn per flow."""

    def __init__(self, intensity: float, nodes: Sequence[Hashable],
                 classes: Sequence[TrafficClass] = DEFAULT_CLASSES,
                 seed: int | None = 0, alpha: float = DEFAULT_ALPHA):
        if intensity < 0:
            raise ValueError("arrival intensity must be nonnegative")
        if len(nodes) < 2:
            raise ValueError("need at least two nodes")
        check_class_table(classes)
        self.intensity = float(intensity)
        self.nodes = list(nodes)
        self.classes = tuple(classes)
        self.alpha = alpha
        self.rng = np.random.default_rng(seed)
        self._next_id = 0
        self._probs = np.array([c.probability for c in self.classes])

    def _make(self, times: np.ndarray) -> list[Flow]:
        n = len(times)
        rng = self.rng
        cls_idx = rng.choice(len(self.classes), size=n, p=self._probs)
        u = rng.uniform(size=n)
        src = rng.integers(0, len(self.nodes), size=n)
        dst = rng.integers(0, len(self.nodes) - 1, size=n)
        dst = np.where(dst >= src, dst + 1, dst)
        flows = []
        for t, k, v, a, b in zip(times, cls_idx, u, src, dst):
            c = self.classes[k]
            lo, hi = c.duration_range
            flows.append(Flow(self._next_id, c, self.nodes[a], self.nodes[b], float(t),
                              lo + v * (hi - lo), AlphaFair(c.weight, self.alpha)))
            self._next_id += 1
        return flows

    def generate(self, t0: float, t1: float) -> list[Flow]:
        if not t0 < t1:
            raise ValueError("need t0 < t1")
        n = self.rng.poisson(self.intensity * (t1 - t0)) if self.intensity > 0 else 0
        times = np.sort(self.rng.uniform(t0, t1, size=n))
        return self._make(times)

    def preload(self, t0: float, margin: float = 0.0) -> list[Flow]:
        """Flows still alive at ``t0`` from a process that started long before.

        Generated on ``[t0 - longest duration - margin, t0)`` and filtered,
        so the population is an exact sample of the stationary state.  Flows
        that ended less than ``margin`` before ``t0`` are kept for consumers
        that delay service (their lifetimes shift later).
        """
        horizon = max(c.duration_range[1] for c in self.classes) + margin
        if horizon <= 0 or self.intensity == 0:
            return []
        return [f for f in self.generate(t0 - horizon, t0) if f.end > t0 - margin]

    def stationary(self, count: int, t0: float = 0.0, duration: float = math.inf) -> list[Flow]:
        """``count`` flows all arriving at ``t0`` and living for ``duration``."""
        flows = self._make(np.full(count, float(t0)))
        for f in flows:
            f.duration = duration
        return flows


def generate_arrivals(g: FlowGenerator, t0: float, t1: float) -> list[Flow]:
    return g.generate(t0, t1)
