"""Two-moment approximations for the mean number in a GI/GI/c system."""

from __future__ import annotations

import math
from dataclasses import dataclass

VARIANTS = ("exact_markovian", "allen_cunneen", "klb")


class InfeasibleSpec(ValueError):
    pass


@dataclass(frozen=True)
class TwoMomentSpec:
    lam: float
    mu: float
    c: int
    ca2: float = 1.0
    cs2: float = 1.0

    @property
    def rho(self) -> float:
        return self.lam / (self.c * self.mu)

    def check(self):
        if not (self.lam > 0 and self.mu > 0 and self.c >= 1):
            raise InfeasibleSpec("lambda, mu and c must be positive")
        if self.rho >= 1.0:
            raise InfeasibleSpec(f"unstable: rho = {self.rho:.6g} >= 1")
        if not (self.ca2 > 0 and self.cs2 > 0):
            raise InfeasibleSpec("SCVs must be positive")


def erlang_b(c: int, a: float) -> float:
    b = 1.0
    for k in range(1, c + 1):
        b = a * b / (k + a * b)
    return b


def erlang_c(spec: TwoMomentSpec) -> float:
    """Probability that an arriving job waits in M/M/c, via the Erlang-B recurrence."""
    spec.check()
    a = spec.lam / spec.mu
    b = erlang_b(spec.c, a)
    return spec.c * b / (spec.c - a * (1.0 - b))


def klb_correction(rho: float, ca2: float, cs2: float) -> float:
    if ca2 <= 1.0:
        return math.exp(-2.0 * (1.0 - rho) * (1.0 - ca2) ** 2 / (3.0 * rho * (ca2 + cs2)))
    return math.exp(-(1.0 - rho) * (ca2 - 1.0) / (ca2 + 4.0 * cs2))


def mean_L(spec: TwoMomentSpec, variant: str = "allen_cunneen") -> float:
    """Mean number in system.

    ``exact_markovian`` ignores the SCVs (exact for M/M/c); ``allen_cunneen``
    scales the M/M/c queue length by (ca2 + cs2)/2; ``klb`` additionally
    applies the Kramer/Langenbach-Belz factor.
    """
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    spec.check()
    rho = spec.rho
    lq = erlang_c(spec) * rho / (1.0 - rho)
    a = spec.lam / spec.mu
    if variant == "exact_markovian":
        return lq + a
    lq *= (spec.ca2 + spec.cs2) / 2.0
    if variant == "klb":
        lq *= klb_correction(rho, spec.ca2, spec.cs2)
    return lq + a
