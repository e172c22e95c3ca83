"""Nonnegative continuous distributions: phase-type and a few parametric families.

Every distribution here is an immutable value. Moments are analytic; variates
are drawn from an explicit :class:`numpy.random.Generator` so that a run is
fully determined by its seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Union

import numpy as np
from scipy import linalg

from . import _kernels

__all__ = [
    "PhaseType",
    "ParametricDist",
    "PHSamplerConfig",
    "ResampleNeeded",
    "InvalidDistribution",
    "exponential",
    "erlang",
    "hyperexp2",
    "lognormal",
    "gamma",
    "fit_h2_balanced",
    "sample_ph",
    "ph_moments",
    "parametric_moments",
    "moments",
    "log_moments",
    "mean",
    "scv",
    "scale",
    "draw",
    "draw_many",
    "to_json",
    "from_json",
]


class InvalidDistribution(ValueError):
    """Parameters do not describe a valid nonnegative distribution."""


class ResampleNeeded(RuntimeError):
    """The PH sampler exhausted its rejection budget."""


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PhaseType:
    """Absorption time of a CTMC with initial law ``alpha`` and sub-generator ``T``."""

    alpha: np.ndarray
    T: np.ndarray

    def __post_init__(self):
        alpha = _frozen(self.alpha).ravel()
        T = _frozen(self.T)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "T", T)
        p = alpha.shape[0]
        if T.shape != (p, p) or p == 0:
            raise InvalidDistribution(f"alpha has {p} phases but T has shape {T.shape}")
        if np.any(alpha < 0) or abs(alpha.sum() - 1.0) > 1e-9:
            raise InvalidDistribution("alpha must be a probability vector")
        diag = np.diag(T)
        off = T - np.diag(diag)
        if np.any(diag >= 0) or np.any(off < 0):
            raise InvalidDistribution("T needs negative diagonal and nonnegative off-diagonal")
        rows = T.sum(axis=1)
        tol = 1e-9 * np.abs(diag)
        if np.any(rows > tol) or not np.any(rows < -tol):
            raise InvalidDistribution("T rows must sum to <= 0 with at least one exit")
        if not np.all(np.isfinite(T)):
            raise InvalidDistribution("T has non-finite entries")
        # every phase has to reach absorption, otherwise -T is singular
        if np.linalg.cond(-T) > 1e14:
            raise InvalidDistribution("-T is singular")

    @property
    def order(self) -> int:
        return self.alpha.shape[0]

    @cached_property
    def exit_rates(self) -> np.ndarray:
        return np.clip(-self.T.sum(axis=1), 0.0, None)

    @cached_property
    def _lu(self):
        return linalg.lu_factor(-self.T)

    @cached_property
    def _sampler_tables(self):
        hold = -np.diag(self.T).copy()
        jumps = np.hstack([self.T, self.exit_rates[:, None]])
        jumps[np.arange(self.order), np.arange(self.order)] = 0.0
        jumps /= hold[:, None]
        jump_cum = np.cumsum(jumps, axis=1)
        jump_cum[:, -1] = 1.0
        alpha_cum = np.cumsum(self.alpha)
        alpha_cum[-1] = 1.0
        run_len, run_last = _kernels.erlang_runs(hold, jump_cum)
        return alpha_cum, hold, jump_cum, run_len, run_last

    def __repr__(self) -> str:
        return f"PhaseType(order={self.order}, mean={ph_moments(self, 1)[0]:.6g})"


_FAMILIES = {
    "exp": ("rate",),
    "erlang": ("k", "rate"),
    "h2": ("p1", "rate1", "rate2"),
    "lognormal": ("mu", "sigma"),
    "gamma": ("shape", "scale"),
}


@dataclass(frozen=True)
class ParametricDist:
    """One of the closed-form families.

    Parameters by family: ``exp(rate)``, ``erlang(k, rate)`` with ``rate`` per
    phase, ``h2(p1, rate1, rate2)``, ``lognormal(mu, sigma)`` of the underlying
    Gaussian, ``gamma(shape, scale)``.
    """

    family: str
    params: tuple = field(default=())

    def __post_init__(self):
        names = _FAMILIES.get(self.family)
        if names is None:
            raise InvalidDistribution(f"unknown family {self.family!r}")
        if len(self.params) != len(names):
            raise InvalidDistribution(f"{self.family} takes parameters {names}")
        object.__setattr__(self, "params", tuple(float(v) for v in self.params))
        vals = dict(zip(names, self.params))
        for name, v in vals.items():
            if name in ("mu", "p1"):
                continue
            if not (v > 0 and math.isfinite(v)):
                raise InvalidDistribution(f"{self.family}: {name} must be positive, got {v}")
        if self.family == "erlang" and vals["k"] != int(vals["k"]):
            raise InvalidDistribution("Erlang k must be an integer >= 1")
        if self.family == "h2" and not 0.0 < vals["p1"] < 1.0:
            raise InvalidDistribution("H2 branch probability must lie in (0, 1)")
        if self.family == "lognormal" and not math.isfinite(vals["mu"]):
            raise InvalidDistribution("lognormal mu must be finite")

    def __getattr__(self, name):
        names = _FAMILIES.get(object.__getattribute__(self, "family"), ())
        if name in names:
            return self.params[names.index(name)]
        raise AttributeError(name)


Distribution = Union[PhaseType, ParametricDist]


# -- constructors -----------------------------------------------------------

def exponential(mean: float = 1.0) -> ParametricDist:
    return ParametricDist("exp", (1.0 / mean,))


def erlang(k: int, mean: float = 1.0) -> ParametricDist:
    """Erlang with ``k`` phases and the given mean (SCV = 1/k)."""
    return ParametricDist("erlang", (int(k), k / mean))


def hyperexp2(p1: float, rate1: float, rate2: float) -> ParametricDist:
    return ParametricDist("h2", (p1, rate1, rate2))


def lognormal(mean: float, scv: float) -> ParametricDist:
    """Log-normal with the given mean and squared coefficient of variation."""
    sigma2 = math.log1p(scv)
    return ParametricDist("lognormal", (math.log(mean) - sigma2 / 2, math.sqrt(sigma2)))


def gamma(mean: float, scv: float) -> ParametricDist:
    return ParametricDist("gamma", (1.0 / scv, mean * scv))


def fit_h2_balanced(mean: float, scv: float) -> ParametricDist:
    """Two-phase hyperexponential with balanced means (p1/rate1 == p2/rate2).

    The faster branch comes first. Requires ``scv > 1``.
    """
    if not scv > 1.0:
        raise InvalidDistribution(f"balanced H2 needs scv > 1, got {scv}")
    if not mean > 0:
        raise InvalidDistribution("mean must be positive")
    p1 = 0.5 * (1.0 + math.sqrt((scv - 1.0) / (scv + 1.0)))
    return ParametricDist("h2", (p1, 2.0 * p1 / mean, 2.0 * (1.0 - p1) / mean))


# -- moments ----------------------------------------------------------------

def ph_moments(ph: PhaseType, n: int) -> np.ndarray:
    """First ``n`` raw moments, ``k! alpha (-T)^{-k} 1``, by repeated solves."""
    if n < 1:
        raise ValueError("n must be >= 1")
    v = np.ones(ph.order)
    out = np.empty(n)
    fact = 1.0
    for k in range(1, n + 1):
        v = linalg.lu_solve(ph._lu, v)
        fact *= k
        out[k - 1] = fact * ph.alpha @ v
    if not np.all(np.isfinite(out)) or np.any(out <= 0):
        raise InvalidDistribution("phase-type moments are not finite and positive")
    return out


def parametric_moments(dist: ParametricDist, n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    ks = np.arange(1, n + 1, dtype=float)
    fam, p = dist.family, dist.params
    if fam == "exp":
        return np.cumprod(ks) / p[0] ** ks
    if fam == "erlang":
        k, rate = p
        return np.cumprod(k + ks - 1) / rate ** ks
    if fam == "h2":
        p1, r1, r2 = p
        return np.cumprod(ks) * (p1 / r1 ** ks + (1 - p1) / r2 ** ks)
    if fam == "lognormal":
        mu, sigma = p
        return np.exp(ks * mu + ks ** 2 * sigma ** 2 / 2)
    if fam == "gamma":
        shape, sc = p
        return np.cumprod(shape + ks - 1) * sc ** ks
    raise InvalidDistribution(fam)


def moments(dist: Distribution, n: int) -> np.ndarray:
    if isinstance(dist, PhaseType):
        return ph_moments(dist, n)
    return parametric_moments(dist, n)


def log_moments(dist: Distribution, n: int) -> np.ndarray:
    m = moments(dist, n)
    if np.any(m <= 0) or not np.all(np.isfinite(m)):
        raise InvalidDistribution("moments must be finite and positive")
    return np.log(m)


def mean(dist: Distribution) -> float:
    return float(moments(dist, 1)[0])


def scv(m) -> float:
    """Squared coefficient of variation from a moment vector, or from a distribution."""
    if isinstance(m, (PhaseType, ParametricDist)):
        m = moments(m, 2)
    return float((m[1] - m[0] ** 2) / m[0] ** 2)


def scale(dist: Distribution, rate: float) -> Distribution:
    """Law of ``X / rate``: the k-th moment becomes ``m_k / rate**k``."""
    if not rate > 0:
        raise ValueError("rate must be positive")
    if isinstance(dist, PhaseType):
        return PhaseType(dist.alpha, dist.T * rate)
    fam, p = dist.family, dist.params
    if fam == "exp":
        return ParametricDist(fam, (p[0] * rate,))
    if fam == "erlang":
        return ParametricDist(fam, (p[0], p[1] * rate))
    if fam == "h2":
        return ParametricDist(fam, (p[0], p[1] * rate, p[2] * rate))
    if fam == "lognormal":
        return ParametricDist(fam, (p[0] - math.log(rate), p[1]))
    if fam == "gamma":
        return ParametricDist(fam, (p[0], p[1] / rate))
    raise InvalidDistribution(fam)


# -- variates ---------------------------------------------------------------

def draw_many(dist: Distribution, rng: np.random.Generator, size: int) -> np.ndarray:
    if isinstance(dist, PhaseType):
        return _kernels.ph_absorption_times(rng, *dist._sampler_tables, int(size))
    fam, p = dist.family, dist.params
    if fam == "exp":
        return rng.exponential(1.0 / p[0], size)
    if fam == "erlang":
        return rng.gamma(p[0], 1.0 / p[1], size)
    if fam == "h2":
        p1, r1, r2 = p
        first = rng.random(size) < p1
        return rng.exponential(1.0, size) / np.where(first, r1, r2)
    if fam == "lognormal":
        return rng.lognormal(p[0], p[1], size)
    if fam == "gamma":
        return rng.gamma(p[0], p[1], size)
    raise InvalidDistribution(fam)


def draw(dist: Distribution, rng: np.random.Generator) -> float:
    return float(draw_many(dist, rng, 1)[0])


# -- random phase-type generation -------------------------------------------

@dataclass(frozen=True)
class PHSamplerConfig:
    max_order: int = 100
    min_order: int = 2
    scv_min: float = 0.0025
    scv_max: float = 20.0
    rate_low: float = 1e-2
    rate_high: float = 1e2
    max_branches: int = 3
    max_tries: int = 200


def _log_uniform(rng, low, high, size=None):
    return np.exp(rng.uniform(math.log(low), math.log(high), size))


def _hyper_erlang(rng, order, cfg):
    branches = int(rng.integers(1, min(order, cfg.max_branches) + 1))
    # random composition of `order` into `branches` positive parts
    cuts = np.sort(rng.choice(np.arange(1, order), branches - 1, replace=False))
    sizes = np.diff(np.concatenate([[0], cuts, [order]]))
    weights = rng.dirichlet(np.ones(branches))
    rates = _log_uniform(rng, cfg.rate_low, cfg.rate_high, branches)
    T = np.zeros((order, order))
    alpha = np.zeros(order)
    pos = 0
    for size, w, r in zip(sizes, weights, rates):
        alpha[pos] = w
        for i in range(pos, pos + size):
            T[i, i] = -r
            if i + 1 < pos + size:
                T[i, i + 1] = r
        pos += size
    return alpha, T


def _coxian(rng, order, cfg):
    rates = _log_uniform(rng, cfg.rate_low, cfg.rate_high, order)
    cont = rng.uniform(0.0, 1.0, order - 1)
    T = np.diag(-rates)
    T[np.arange(order - 1), np.arange(1, order)] = rates[:-1] * cont
    alpha = np.zeros(order)
    alpha[0] = 1.0
    return alpha, T


def _general(rng, order, cfg):
    hold = _log_uniform(rng, cfg.rate_low, cfg.rate_high, order)
    exits = np.where(rng.random(order) < 0.5, rng.uniform(0.1, 1.0, order), 0.0)
    if not np.any(exits > 0):
        exits[rng.integers(order)] = rng.uniform(0.1, 1.0)
    T = np.zeros((order, order))
    for i in range(order):
        if exits[i] >= 1.0:
            continue
        k = int(rng.integers(1, order))
        targets = rng.choice(np.delete(np.arange(order), i), k, replace=False)
        T[i, targets] = (1.0 - exits[i]) * rng.dirichlet(np.ones(k))
    T *= hold[:, None]
    T[np.arange(order), np.arange(order)] = -hold
    alpha = rng.dirichlet(np.ones(order))
    return alpha, T


_STRUCTURES = (_hyper_erlang, _coxian, _general)


def sample_ph(seed, config: PHSamplerConfig | None = None) -> PhaseType:
    """Draw a random unit-mean phase-type distribution.

    A structure (hyper-Erlang mixture, Coxian chain or general sub-generator)
    and an order in ``[min_order, max_order]`` are picked uniformly, rates are
    log-uniform, and the result is rescaled to mean 1. Candidates are rejected
    until the SCV falls in ``[scv_min, scv_max]``; :class:`ResampleNeeded` is
    raised after ``max_tries`` rejections.

    ``seed`` is an integer or a Generator.
    """
    cfg = config or PHSamplerConfig()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    for _ in range(cfg.max_tries):
        build = _STRUCTURES[int(rng.integers(len(_STRUCTURES)))]
        order = int(rng.integers(cfg.min_order, cfg.max_order + 1))
        alpha, T = build(rng, order, cfg)
        try:
            ph = PhaseType(alpha, T)
            m = ph_moments(ph, 2)
        except InvalidDistribution:
            continue
        ph = PhaseType(ph.alpha, ph.T * m[0])
        if cfg.scv_min <= scv(m) <= cfg.scv_max:
            return ph
    raise ResampleNeeded(f"no PH with SCV in [{cfg.scv_min}, {cfg.scv_max}] after {cfg.max_tries} tries")


# -- serialization ----------------------------------------------------------

def to_json(dist: Distribution) -> dict:
    if isinstance(dist, PhaseType):
        return {"kind": "ph", "alpha": dist.alpha.tolist(), "T": dist.T.tolist()}
    names = _FAMILIES[dist.family]
    out = {"kind": dist.family}
    for name, v in zip(names, dist.params):
        out[name] = int(v) if name == "k" else v
    return out


def from_json(obj: dict) -> Distribution:
    kind = obj.get("kind")
    if kind == "ph":
        return PhaseType(obj["alpha"], obj["T"])
    if kind not in _FAMILIES:
        raise InvalidDistribution(f"unknown distribution kind {kind!r}")
    try:
        return ParametricDist(kind, tuple(obj[name] for name in _FAMILIES[kind]))
    except KeyError as exc:
        raise InvalidDistribution(f"{kind} is missing parameter {exc}") from None
