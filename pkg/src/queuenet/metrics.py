"""Accuracy metrics on occupancy distributions and the 32-group segmentation.

``Y`` and ``Yhat`` are ``(N, l)`` arrays of truncated probability vectors,
index ``j`` being the probability of ``j`` jobs in the system.
"""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

DEFAULT_PERCENTILES = (25, 50, 75, 90, 99, 99.9)
RHO_EDGES = (0.25, 0.5, 0.75)
RHO_RANGE = (0.01, 0.95)
SCV_THRESHOLD = 1.0
SERVER_SPLIT = 5


def _pair(Y, Yhat):
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    Yhat = np.atleast_2d(np.asarray(Yhat, dtype=float))
    if Y.shape[0] != Yhat.shape[0]:
        raise ValueError(f"row counts differ: {Y.shape[0]} truth vs {Yhat.shape[0]} predicted")
    if Y.shape[1] != Yhat.shape[1]:
        # shorter vectors are padded with zero mass
        width = max(Y.shape[1], Yhat.shape[1])
        Y = np.pad(Y, ((0, 0), (0, width - Y.shape[1])))
        Yhat = np.pad(Yhat, ((0, 0), (0, width - Yhat.shape[1])))
    return Y, Yhat


def sae(Y, Yhat) -> float:
    """Mean over rows of the summed absolute probability error."""
    Y, Yhat = _pair(Y, Yhat)
    if Y.shape[0] == 0:
        return float("nan")
    return float(np.abs(Y - Yhat).sum(axis=1).mean())


def quantiles(P, percentile: float) -> np.ndarray:
    """Left-continuous inverse CDF per row: min j with CDF(j) >= percentile/100.

    Rows whose truncated mass never reaches the level get ``l`` (beyond the
    support).
    """
    P = np.atleast_2d(np.asarray(P, dtype=float))
    cdf = np.cumsum(P, axis=1)
    reached = cdf >= percentile / 100.0 - 1e-12
    q = np.argmax(reached, axis=1)
    q[~reached.any(axis=1)] = P.shape[1]
    return q


@dataclass(frozen=True)
class MetricValue:
    value: float
    used: int
    excluded: int


def pare_detail(Y, Yhat, percentile: float) -> MetricValue:
    """PARE with the zero-quantile rule.

    A row whose true quantile is 0 contributes 0 when the predicted quantile is
    also 0 and is excluded (and counted) otherwise.
    """
    Y, Yhat = _pair(Y, Yhat)
    qt = quantiles(Y, percentile).astype(float)
    qp = quantiles(Yhat, percentile).astype(float)
    zero = qt == 0
    excluded = zero & (qp != 0)
    keep = ~excluded
    err = np.zeros_like(qt)
    nz = ~zero
    err[nz] = np.abs(qt[nz] - qp[nz]) / qt[nz]
    used = int(keep.sum())
    value = 100.0 * float(err[keep].mean()) if used else float("nan")
    return MetricValue(value, used, int(excluded.sum()))


def pare(Y, Yhat, percentile: float) -> float:
    return pare_detail(Y, Yhat, percentile).value


def distribution_means(P) -> np.ndarray:
    P = np.atleast_2d(np.asarray(P, dtype=float))
    return P @ np.arange(P.shape[1])


def rem_from_means(true_means, pred_means, denominator: str = "pred") -> MetricValue:
    """Relative error of the mean, in percent.

    ``denominator="pred"`` divides by the predicted mean; ``"true"`` by the
    ground truth. Rows with a zero denominator are excluded unless both
    means are zero, in which case they contribute 0.
    """
    t = np.asarray(true_means, dtype=float)
    p = np.asarray(pred_means, dtype=float)
    if t.shape != p.shape:
        raise ValueError(f"row counts differ: {t.shape} vs {p.shape}")
    if denominator not in ("pred", "true"):
        raise ValueError("denominator must be 'pred' or 'true'")
    den = p if denominator == "pred" else t
    diff = np.abs(t - p)
    zero_den = den == 0
    excluded = zero_den & (diff != 0)
    keep = ~excluded
    err = np.zeros_like(t)
    err[~zero_den] = diff[~zero_den] / den[~zero_den]
    used = int(keep.sum())
    value = 100.0 * float(err[keep].mean()) if used else float("nan")
    return MetricValue(value, used, int(excluded.sum()))


def rem_detail(Y, Yhat, denominator: str = "pred") -> MetricValue:
    Y, Yhat = _pair(Y, Yhat)
    return rem_from_means(distribution_means(Y), distribution_means(Yhat), denominator)


def rem(Y, Yhat, denominator: str = "pred") -> float:
    return rem_detail(Y, Yhat, denominator).value


# -- segmentation ------------------------------------------------------------------

@dataclass(frozen=True)
class SegmentKey:
    scv: tuple            # "Low"/"High" per distribution: arrival, then service(s)
    q_rho: int
    servers: str | None   # "Low"/"High" for homogeneous systems, None otherwise

    def label(self) -> tuple:
        out = (*self.scv, self.q_rho)
        return out + (self.servers,) if self.servers is not None else out


@dataclass(frozen=True)
class Segment:
    key: SegmentKey
    flagged: bool


def _scv_flag(x: float) -> str:
    # SCV exactly 1 (exponential) belongs to the low group
    return "Low" if x <= SCV_THRESHOLD + 1e-9 else "High"


def rho_quartile(rho: float) -> tuple[int, bool]:
    """Utilisation band 1..4 with left-closed bands; band 4 is closed at 0.95."""
    lo, hi = RHO_RANGE
    flagged = not lo <= rho <= hi
    q = 1 + sum(rho >= e for e in RHO_EDGES)
    return q, flagged


def segment(meta: Mapping, system: str | None = None) -> Segment:
    """Group of one instance from its metadata.

    Homogeneous rows use the arrival and service SCV, the target utilisation
    and the server band; heterogeneous rows use three SCVs and the simulated
    utilisation.
    """
    scvs = meta["scv_services"]
    if system is None:
        system = "gg2" if len(scvs) == 2 else "ggc"
    if system == "gg2":
        rho = meta.get("measured_rho")
        if rho is None:
            rho = meta["target_rho"]
        servers = None
    else:
        rho = meta.get("target_rho")
        if rho is None:
            rho = meta["measured_rho"]
        servers = "Low" if int(meta["c"]) <= SERVER_SPLIT else "High"
    q, flagged = rho_quartile(float(rho))
    flags = (_scv_flag(meta["scv_arrival"]),) + tuple(_scv_flag(s) for s in scvs)
    return Segment(SegmentKey(flags, q, servers), flagged)


def all_keys(system: str) -> list[SegmentKey]:
    """The 32 groups in table order (last attribute varies fastest)."""
    lh = ("Low", "High")
    if system == "ggc":
        return [SegmentKey((a, s), q, c) for a, s, q, c in itertools.product(lh, lh, range(1, 5), lh)]
    if system == "gg2":
        return [SegmentKey((a, s1, s2), q, None) for a, s1, s2, q in itertools.product(lh, lh, lh, range(1, 5))]
    raise ValueError(system)


# -- report ------------------------------------------------------------------------

def report_columns(system: str, methods: Sequence[str], percentiles=DEFAULT_PERCENTILES) -> list[str]:
    cols = ["group", "scv_arrival"]
    cols += ["scv_service"] if system == "ggc" else ["scv_service1", "scv_service2"]
    cols += ["q_rho"] + (["servers"] if system == "ggc" else []) + ["count"]
    for m in methods:
        cols += [f"{m}_pare_{p:g}" for p in percentiles] + [f"{m}_rem", f"{m}_excluded"]
    return cols


def report(
    truth,
    predictions: Mapping[str, object],
    metas: Sequence[Mapping],
    system: str,
    percentiles: Sequence[float] = DEFAULT_PERCENTILES,
    rem_denominator: str = "pred",
) -> list[dict]:
    """Per-group PARE and REM rows for each method.

    ``predictions`` maps a method name to either an ``(N, l)`` distribution
    array or a length-N vector of predicted means (mean-only methods get REM
    but no PARE).
    """
    Y = np.atleast_2d(np.asarray(truth, dtype=float))
    if len(metas) != Y.shape[0]:
        raise ValueError(f"row counts differ: {Y.shape[0]} labels vs {len(metas)} metadata rows")
    preds = {}
    for name, P in predictions.items():
        P = np.asarray(P, dtype=float)
        if P.shape[0] != Y.shape[0]:
            raise ValueError(f"row counts differ: {Y.shape[0]} labels vs {P.shape[0]} rows for {name}")
        preds[name] = P
    # means over all rows at once so a row's value does not depend on its group
    pred_means = {name: distribution_means(P) if P.ndim == 2 else P for name, P in preds.items()}
    groups = np.array([all_keys(system).index(segment(m, system).key) for m in metas], dtype=int)
    true_means = distribution_means(Y)
    rows = []
    for gi, key in enumerate(all_keys(system)):
        sel = groups == gi
        lab = key.label()
        row = {"group": gi + 1, "scv_arrival": lab[0]}
        if system == "ggc":
            row.update(scv_service=lab[1], q_rho=lab[2], servers=lab[3])
        else:
            row.update(scv_service1=lab[1], scv_service2=lab[2], q_rho=lab[3])
        row["count"] = int(sel.sum())
        for name, P in preds.items():
            excluded = 0
            for p in percentiles:
                col = f"{name}_pare_{p:g}"
                if P.ndim == 2 and sel.any():
                    r = pare_detail(Y[sel], P[sel], p)
                    row[col] = r.value
                    excluded += r.excluded
                else:
                    row[col] = float("nan")
            if sel.any():
                r = rem_from_means(true_means[sel], pred_means[name][sel], rem_denominator)
                row[f"{name}_rem"] = r.value
                excluded += r.excluded
            else:
                row[f"{name}_rem"] = float("nan")
            row[f"{name}_excluded"] = excluded
        rows.append(row)
    return rows


def report_csv(rows: list[dict], system: str, methods: Sequence[str], percentiles=DEFAULT_PERCENTILES) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=report_columns(system, methods, percentiles), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()
