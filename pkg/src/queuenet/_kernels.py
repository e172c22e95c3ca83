"""Compiled inner loops for variate generation and FCFS server assignment."""

import numba
import numpy as np


@numba.njit(cache=True)
def _pick(cum, u):
    # first index with cum[i] > u; cum is nondecreasing and ends at 1
    lo = 0
    hi = cum.shape[0] - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if cum[mid] > u:
            hi = mid
        else:
            lo = mid + 1
    return lo


@numba.njit(cache=True)
def ph_absorption_times(rng, alpha_cum, hold_rates, jump_cum, run_len, run_last, size):
    """Draw absorption times of a CTMC.

    ``jump_cum[i]`` is the cumulative embedded-chain row of phase ``i``; its
    last column is the absorbing state (index ``p``). A run of ``run_len[i]``
    phases starting at ``i`` that share one holding rate and pass on with
    certainty is drawn as a single gamma variate ending in ``run_last[i]``.
    """
    p = hold_rates.shape[0]
    out = np.empty(size)
    for n in range(size):
        state = _pick(alpha_cum, rng.random())
        t = 0.0
        while state < p:
            k = run_len[state]
            if k == 1:
                t += rng.exponential(1.0) / hold_rates[state]
            else:
                t += rng.gamma(k, 1.0) / hold_rates[state]
                state = run_last[state]
            state = _pick(jump_cum[state], rng.random())
        out[n] = t
    return out


def erlang_runs(hold_rates, jump_cum):
    """Length and last phase of the same-rate deterministic run from each phase."""
    p = hold_rates.shape[0]
    nxt = np.full(p, -1)
    for i in range(p):
        row = jump_cum[i]
        j = int(np.searchsorted(row, 0.0, side="right"))
        if j < p and row[j] >= 1.0:
            nxt[i] = j
    run_len = np.ones(p, dtype=np.int64)
    run_last = np.arange(p)
    for i in range(p - 1, -1, -1):
        j = nxt[i]
        if j >= 0 and hold_rates[j] == hold_rates[i] and j > i:
            run_len[i] = run_len[j] + 1
            run_last[i] = run_last[j]
    return run_len, run_last


@numba.njit(cache=True)
def fcfs_assign(arrivals, services, c):
    """FCFS with ``c`` identical servers; each job takes the earliest-free server.

    Returns (start, departure, server) per job.
    """
    n = arrivals.shape[0]
    free = np.zeros(c)
    start = np.empty(n)
    depart = np.empty(n)
    server = np.empty(n, dtype=np.int64)
    for i in range(n):
        k = 0
        best = free[0]
        for j in range(1, c):
            if free[j] < best:
                best = free[j]
                k = j
        s = arrivals[i] if arrivals[i] > best else best
        start[i] = s
        depart[i] = s + services[i]
        free[k] = depart[i]
        server[i] = k
    return start, depart, server


@numba.njit(cache=True)
def fcfs_assign_two(rng, arrivals, services0, services1, rule, preferred):
    """FCFS with two non-identical servers.

    ``services0``/``services1`` are i.i.d. service streams of each server,
    consumed in order of use. ``rule``: 0 random, 1 always ``preferred``
    when both are idle (covers fastest-first and fixed priority).
    """
    n = arrivals.shape[0]
    free0 = 0.0
    free1 = 0.0
    used0 = 0
    used1 = 0
    start = np.empty(n)
    depart = np.empty(n)
    server = np.empty(n, dtype=np.int64)
    for i in range(n):
        a = arrivals[i]
        idle0 = free0 <= a
        idle1 = free1 <= a
        if idle0 and idle1:
            if rule == 0:
                k = 0 if rng.random() < 0.5 else 1
            else:
                k = preferred
            s = a
        elif idle0:
            k = 0
            s = a
        elif idle1:
            k = 1
            s = a
        elif free0 < free1:
            k = 0
            s = free0
        elif free1 < free0:
            k = 1
            s = free1
        else:
            if rule == 0:
                k = 0 if rng.random() < 0.5 else 1
            else:
                k = preferred
            s = free0
        if k == 0:
            d = s + services0[used0]
            used0 += 1
            free0 = d
        else:
            d = s + services1[used1]
            used1 += 1
            free1 = d
        start[i] = s
        depart[i] = d
        server[i] = k
    return start, depart, server
