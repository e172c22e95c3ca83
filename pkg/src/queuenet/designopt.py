"""Brute-force choice of server speed and count under a linear holding cost.

Total cost of a design is ``c1_base * (1 + rate)**c1_exponent * c + C2 * E[L]``
where ``rate`` is the per-server service rate and ``c`` the number of servers.
An evaluator maps arrays of (rate, c) cells to E[L]; cells it cannot handle,
or whose offered load is at least 1, are infeasible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import dists
from .datagen import preprocess
from .neuralnet import MLPParams, infer_batch
from .simqueue import QueueSpec, SimConfig, mmc_mean_L, simulate

Evaluator = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class CostSpec:
    c1_base: float = 500.0
    c1_exponent: float = 5.0
    C2: float = 100.0
    rate_min: float = 0.1
    rate_max: float = 0.3
    rate_step: float = 0.001
    c_max: int = 10
    c_min: int = 1
    lam: float = 1.0
    queue_only: bool = False

    def __post_init__(self):
        if not self.rate_step > 0:
            raise ValueError("rate_step must be positive")
        if not (self.rate_max > self.rate_min and self.c_max >= self.c_min >= 1):
            raise ValueError("empty design domain")

    def rates(self) -> np.ndarray:
        """Half-open grid [rate_min, rate_max) in steps of rate_step."""
        n = int(round((self.rate_max - self.rate_min) / self.rate_step))
        return self.rate_min + self.rate_step * np.arange(n)

    def servers(self) -> np.ndarray:
        return np.arange(self.c_min, self.c_max + 1)


def cost(rate, c, EL, spec: CostSpec = CostSpec()):
    return spec.c1_base * (1.0 + np.asarray(rate)) ** spec.c1_exponent * np.asarray(c) + spec.C2 * np.asarray(EL)


@dataclass
class OptResult:
    rate: float
    c: int
    cost: float
    EL: float
    rates: np.ndarray
    servers: np.ndarray
    surface: np.ndarray      # cost[rate_index, c_index], nan where infeasible
    EL_surface: np.ndarray

    @property
    def n_cells(self) -> int:
        return self.surface.size

    def rows(self):
        for i, r in enumerate(self.rates):
            for j, c in enumerate(self.servers):
                yield float(r), int(c), float(self.surface[i, j])


def brute_force(evaluator: Evaluator, spec: CostSpec = CostSpec()) -> OptResult:
    """Evaluate every grid cell and return the cheapest feasible one.

    Ties go to the fewest servers, then the slowest rate.
    """
    rates, servers = spec.rates(), spec.servers()
    R, C = np.meshgrid(rates, servers, indexing="ij")
    stable = spec.lam < C * R
    EL = np.full(R.shape, np.nan)
    try:
        vals = np.asarray(evaluator(R[stable], C[stable]), dtype=float)
    except Exception:
        vals = np.array([_safe_cell(evaluator, r, c) for r, c in zip(R[stable], C[stable])])
    EL[stable] = vals
    if spec.queue_only:
        EL = EL - spec.lam / R
    feasible = np.isfinite(EL) & (EL >= 0)
    surface = np.where(feasible, cost(R, C, np.where(feasible, EL, 0.0), spec), np.nan)
    if not feasible.any():
        raise ValueError("no feasible design on the grid")
    fi, fj = np.nonzero(feasible)
    order = np.lexsort((R[fi, fj], C[fi, fj], surface[fi, fj]))
    i, j = fi[order[0]], fj[order[0]]
    return OptResult(float(R[i, j]), int(C[i, j]), float(surface[i, j]), float(EL[i, j]),
                     rates, servers, surface, EL)


def _safe_cell(evaluator, r, c):
    try:
        return float(np.asarray(evaluator(np.array([r]), np.array([c])))[0])
    except Exception:
        return np.nan


# -- evaluators --------------------------------------------------------------------

def mmc_evaluator(lam: float = 1.0) -> Evaluator:
    """Exact M/M/c mean number in system."""
    def ev(rates, cs):
        return np.array([mmc_mean_L(lam, float(r), int(c)) for r, c in zip(rates, cs)])
    return ev


def nn_evaluator(params: MLPParams, arrival: dists.Distribution, service_shape: dists.Distribution) -> Evaluator:
    """E[L] from the surrogate; ``service_shape`` is rescaled to each cell's rate."""
    n = (params.input_dim - 1) // 2
    shape_mean = dists.mean(service_shape)
    arr_block = dists.log_moments(arrival, n)
    shape_block = dists.log_moments(service_shape, n)
    ks = np.arange(1, n + 1)
    shift = arr_block[0] * ks

    def ev(rates, cs):
        rates = np.asarray(rates, dtype=float)
        # scaling to rate r multiplies the k-th moment by (1 / (r * mean))**k
        svc = shape_block[None, :] - np.log(rates * shape_mean)[:, None] * ks[None, :]
        X = np.hstack([np.broadcast_to(arr_block - shift, (len(rates), n)), svc - shift,
                       np.asarray(cs, dtype=float)[:, None]])
        P = infer_batch(params, X)
        return P.astype(np.float64) @ np.arange(P.shape[1])
    return ev


def sim_evaluator(arrival: dists.Distribution, service_shape: dists.Distribution, cfg: SimConfig) -> Evaluator:
    shape_mean = dists.mean(service_shape)

    def ev(rates, cs):
        out = []
        for r, c in zip(rates, cs):
            svc = dists.scale(service_shape, float(r) * shape_mean)
            out.append(simulate(QueueSpec(arrival, (svc,), int(c)), cfg).mean_L)
        return np.array(out)
    return ev


def nn_features(arrival, service_shape, rate, c, n=4) -> np.ndarray:
    """Feature row the surrogate sees for one design cell (reference path)."""
    svc = dists.scale(service_shape, rate * dists.mean(service_shape))
    return preprocess(QueueSpec(arrival, (svc,), c), n)
