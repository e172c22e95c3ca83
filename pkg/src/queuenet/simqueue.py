"""FCFS multi-server queue simulation and exact Markovian occupancy.

The simulator is trace based: inter-arrival and service times are drawn in
bulk, jobs are dispatched to servers in arrival order, and the number in
system is integrated over time from the merged arrival/departure epochs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from . import _kernels
from .dists import Distribution, draw_many, from_json, mean, to_json

IDLE_RULES = ("random", "fastest-first", "fixed-priority")


class InfeasibleQueue(ValueError):
    """The queue has no steady state for the given parameters."""


@dataclass(frozen=True)
class QueueSpec:
    arrival: Distribution
    services: tuple
    c: int = 1

    def __post_init__(self):
        services = tuple(self.services)
        object.__setattr__(self, "services", services)
        if len(services) not in (1, 2):
            raise ValueError("a queue has one shared or two per-server service distributions")
        if len(services) == 2:
            object.__setattr__(self, "c", 2)
        if int(self.c) < 1:
            raise ValueError("c must be >= 1")
        object.__setattr__(self, "c", int(self.c))

    @property
    def heterogeneous(self) -> bool:
        return len(self.services) == 2

    def offered_load(self) -> float:
        """lambda * E[S] / c for a homogeneous queue, lambda / sum(mu_i) otherwise."""
        lam = 1.0 / mean(self.arrival)
        if self.heterogeneous:
            return lam / sum(1.0 / mean(s) for s in self.services)
        return lam * mean(self.services[0]) / self.c

    def to_json(self) -> dict:
        return {
            "arrival": to_json(self.arrival),
            "services": [to_json(s) for s in self.services],
            "c": self.c,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "QueueSpec":
        return cls(from_json(obj["arrival"]), tuple(from_json(s) for s in obj["services"]), obj.get("c", 1))


@dataclass(frozen=True)
class SimConfig:
    num_arrivals: int = 1_000_000
    warmup_fraction: float = 0.01
    seed: int = 0
    l: int = 500
    delta: float = 1e-3

    def __post_init__(self):
        if self.num_arrivals < 2:
            raise ValueError("num_arrivals must be >= 2")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if self.l < 1:
            raise ValueError("l must be >= 1")


@dataclass
class SimResult:
    probs: np.ndarray
    tail_mass: float
    per_server_busy: np.ndarray
    mean_L: float
    sim_time: float
    seed: int = 0
    mean_sojourn: float = float("nan")
    arrival_rate: float = float("nan")
    delta: float = 1e-3

    @property
    def flagged(self) -> bool:
        """Truncation lost more than ``delta`` probability mass."""
        return self.tail_mass > self.delta

    @property
    def rho(self) -> float:
        """Average fraction of time the servers are busy."""
        return float(np.mean(self.per_server_busy))

    def to_json(self) -> dict:
        return {
            "probs": self.probs.tolist(),
            "tail_mass": self.tail_mass,
            "busy": self.per_server_busy.tolist(),
            "mean_L": self.mean_L,
            "seed": self.seed,
        }


def _occupancy(arrivals, start, depart, server, n_servers, cfg: SimConfig) -> SimResult:
    n = arrivals.shape[0]
    k0 = int(math.floor(cfg.warmup_fraction * n))
    t0, t1 = arrivals[k0], arrivals[-1]
    horizon = t1 - t0

    dep_sorted = np.sort(depart)
    times = np.concatenate([arrivals, dep_sorted])
    steps = np.concatenate([np.ones(n, dtype=np.int64), -np.ones(n, dtype=np.int64)])
    # arrivals first on ties: a zero service time then departs after its own
    # arrival, and any overshoot lasts zero time and carries no weight
    order = np.lexsort((-steps, times))
    times = times[order]
    level = np.cumsum(steps[order])
    lo = np.clip(times[:-1], t0, t1)
    hi = np.clip(times[1:], t0, t1)
    hist = np.bincount(level[:-1], weights=hi - lo)
    full = hist / hist.sum()

    l = cfg.l
    probs = np.zeros(l)
    probs[: min(l, full.shape[0])] = full[:l]
    tail = float(full[l:].sum())

    busy_time = np.clip(depart, t0, t1) - np.clip(start, t0, t1)
    busy = np.bincount(server, weights=busy_time, minlength=n_servers) / horizon

    window = slice(k0, n)
    return SimResult(
        probs=probs,
        tail_mass=tail,
        per_server_busy=busy,
        mean_L=float(np.arange(full.shape[0]) @ full),
        sim_time=float(horizon),
        seed=cfg.seed,
        mean_sojourn=float(np.mean(depart[window] - arrivals[window])),
        arrival_rate=float((n - 1 - k0) / horizon),
        delta=cfg.delta,
    )


def simulate(spec: QueueSpec, cfg: SimConfig) -> SimResult:
    """Time-averaged number-in-system distribution of a GI/GI/c queue.

    Statistics are collected from the arrival of job ``warmup_fraction * N``
    to the last arrival. Two-server heterogeneous specs are dispatched to
    :func:`simulate_hetero` with the random idle rule.
    """
    if spec.heterogeneous:
        return simulate_hetero(spec, cfg)
    rng = np.random.default_rng(cfg.seed)
    n = cfg.num_arrivals
    arrivals = np.cumsum(draw_many(spec.arrival, rng, n))
    services = draw_many(spec.services[0], rng, n)
    start, depart, server = _kernels.fcfs_assign(arrivals, services, spec.c)
    return _occupancy(arrivals, start, depart, server, spec.c, cfg)


def simulate_hetero(spec: QueueSpec, cfg: SimConfig, idle_rule: str = "random") -> SimResult:
    """Two heterogeneous servers, FCFS, one queue.

    ``idle_rule`` decides which server takes a job that finds both idle:
    ``random`` (fair coin), ``fastest-first`` (smaller mean service time) or
    ``fixed-priority`` (server 0).
    """
    if not spec.heterogeneous:
        raise ValueError("simulate_hetero needs two service distributions")
    if idle_rule not in IDLE_RULES:
        raise ValueError(f"idle_rule must be one of {IDLE_RULES}")
    rng = np.random.default_rng(cfg.seed)
    n = cfg.num_arrivals
    arrivals = np.cumsum(draw_many(spec.arrival, rng, n))
    s0 = draw_many(spec.services[0], rng, n)
    s1 = draw_many(spec.services[1], rng, n)
    if idle_rule == "random":
        rule, preferred = 0, 0
    elif idle_rule == "fastest-first":
        rule = 1
        preferred = 0 if mean(spec.services[0]) <= mean(spec.services[1]) else 1
    else:
        rule, preferred = 1, 0
    start, depart, server = _kernels.fcfs_assign_two(rng, arrivals, s0, s1, rule, preferred)
    return _occupancy(arrivals, start, depart, server, 2, cfg)


@dataclass
class ReplicationCI:
    mean: float
    half_width: float
    values: np.ndarray = field(repr=False)
    confidence: float = 0.95

    @property
    def length(self) -> float:
        return 2.0 * self.half_width

    def to_json(self) -> dict:
        return {
            "mean_L": self.mean,
            "half_width": self.half_width,
            "ci_length": self.length,
            "confidence": self.confidence,
            "values": self.values.tolist(),
        }


def replication_ci(
    spec: QueueSpec,
    cfg: SimConfig,
    reps: int,
    seeds: Sequence[int] | None = None,
    confidence: float = 0.95,
) -> ReplicationCI:
    """Student-t confidence interval for mean_L over independent replications.

    Replication ``r`` uses ``seeds[r]``; by default seeds are spawned from
    ``cfg.seed``.
    """
    if reps < 2:
        raise ValueError("need at least two replications")
    if seeds is None:
        seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(cfg.seed).spawn(reps)]
    if len(seeds) != reps:
        raise ValueError("one seed per replication")
    values = np.array([
        simulate(spec, SimConfig(cfg.num_arrivals, cfg.warmup_fraction, int(s), cfg.l, cfg.delta)).mean_L
        for s in seeds
    ])
    sd = values.std(ddof=1)
    half = float(stats.t.ppf(0.5 + confidence / 2, reps - 1) * sd / math.sqrt(reps))
    return ReplicationCI(float(values.mean()), half, values, confidence)


# -- exact M/M/c -------------------------------------------------------------

def mmc_distribution(lam: float, mu: float, c: int, l: int) -> tuple[np.ndarray, float]:
    """Truncated M/M/c occupancy vector and the closed-form mass beyond ``l - 1``."""
    if lam <= 0 or mu <= 0 or c < 1 or l < 1:
        raise InfeasibleQueue("lambda, mu, c and l must be positive")
    a = lam / mu
    rho = a / c
    if rho >= 1.0:
        raise InfeasibleQueue(f"unstable M/M/c: rho = {rho:.6g} >= 1")
    # unnormalised terms relative to P0, built by recurrence to avoid factorials
    m = max(l, c)
    terms = np.empty(m + 1)
    terms[0] = 1.0
    for j in range(1, m + 1):
        terms[j] = terms[j - 1] * a / min(j, c)
    norm = terms[:c].sum() + terms[c] / (1.0 - rho)
    p = terms / norm
    probs = p[:l]
    # mass at j >= l
    if l >= c:
        tail = p[l] / (1.0 - rho)
    else:
        tail = p[l:c].sum() + p[c] / (1.0 - rho)
    return probs, float(tail)


def mmc_exact(lam: float, mu: float, c: int, l: int = 500) -> np.ndarray:
    """Exact stationary P(N = j), j < l, of the M/M/c queue."""
    return mmc_distribution(lam, mu, c, l)[0]


def mmc_mean_L(lam: float, mu: float, c: int) -> float:
    """Exact mean number in system of M/M/c (Erlang-C based)."""
    from .baselines import TwoMomentSpec, erlang_c

    a = lam / mu
    rho = a / c
    wait = erlang_c(TwoMomentSpec(lam, mu, c))
    return wait * rho / (1.0 - rho) + a
