"""Queue instance generation, labeling, feature construction and dataset files.

Dataset files are JSON lines. Line 0 is a header
``{"v": 1, "system": "ggc"|"gg2", "n": 4, "l": 500, ...}``; every further line
is one instance ``{"index", "features", "label", "meta"}``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from . import dists
from .dists import Distribution, PHSamplerConfig, ResampleNeeded
from .simqueue import QueueSpec, SimConfig, simulate, simulate_hetero

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SYSTEMS = ("ggc", "gg2")
MAX_STORED_MOMENTS = 10
RHO_MIN = 0.01
RHO_MAX = 0.95
PHI = 0.01


def derive_seed(master: int, *keys: int) -> int:
    """Stable 63-bit seed for ``(master, *keys)``, independent of execution order."""
    state = np.random.SeedSequence([int(master), *[int(k) for k in keys]]).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


# -- specs --------------------------------------------------------------------

@dataclass(frozen=True)
class GeneratedSpec:
    spec: QueueSpec
    target_rho: float
    family: str = "ph"
    service_rates: tuple = ()


def gen_ggc_spec(seed: int, ph_config: PHSamplerConfig | None = None, rho_min: float = RHO_MIN,
                 rho_max: float = RHO_MAX) -> GeneratedSpec:
    """Random GI/GI/c instance: unit-mean PH arrivals, c ~ U{1..10}, rho ~ U[rho_min, rho_max]."""
    rng = np.random.default_rng(seed)
    arrival = dists.sample_ph(rng, ph_config)
    service = dists.sample_ph(rng, ph_config)
    c = int(rng.integers(1, 11))
    rho = float(rng.uniform(rho_min, rho_max))
    mu = 1.0 / (c * rho)
    return GeneratedSpec(QueueSpec(arrival, (dists.scale(service, mu),), c), rho, "ph", (mu,))


def gen_gg2_spec(seed: int, ph_config: PHSamplerConfig | None = None, rho_min: float = RHO_MIN,
                 rho_max: float = RHO_MAX, phi: float = PHI) -> GeneratedSpec:
    """Random two-server heterogeneous instance.

    The aggregate rate mu has 1/mu ~ U[rho_min, rho_max]; it is split as
    mu1 ~ U(phi, mu - phi), mu2 = mu - mu1. The target rho recorded is 1/mu,
    the utilisation of the pooled single server.
    """
    rng = np.random.default_rng(seed)
    arrival = dists.sample_ph(rng, ph_config)
    s1 = dists.sample_ph(rng, ph_config)
    s2 = dists.sample_ph(rng, ph_config)
    inv_mu = float(rng.uniform(rho_min, rho_max))
    mu = 1.0 / inv_mu
    mu1 = float(rng.uniform(phi, mu - phi))
    mu2 = mu - mu1
    spec = QueueSpec(arrival, (dists.scale(s1, mu1), dists.scale(s2, mu2)), 2)
    return GeneratedSpec(spec, inv_mu, "ph", (mu1, mu2))


def canonical_services(spec: QueueSpec) -> tuple:
    """Service distributions ordered by decreasing rate (faster server first)."""
    if not spec.heterogeneous:
        return spec.services
    a, b = spec.services
    return (a, b) if dists.mean(a) <= dists.mean(b) else (b, a)


def preprocess(spec: QueueSpec, n: int = 4, swap: bool = False) -> np.ndarray:
    """Network input: log-moments of arrival and service(s), then c (homogeneous only).

    Moments are expressed with the mean inter-arrival time as the time unit.
    """
    services = canonical_services(spec)
    if swap and spec.heterogeneous:
        services = services[::-1]
    blocks = [dists.log_moments(spec.arrival, n)] + [dists.log_moments(s, n) for s in services]
    return _assemble(blocks, n, None if spec.heterogeneous else spec.c)


def _assemble(blocks, n, c):
    # time unit = mean inter-arrival time, so the arrival log-mean is exactly 0
    shift = blocks[0][0] * np.arange(1, n + 1)
    parts = [np.asarray(b[:n], dtype=float) - shift for b in blocks]
    if c is not None:
        parts.append(np.array([float(c)]))
    return np.concatenate(parts)


def features_from_meta(meta: dict, n: int, system: str) -> np.ndarray:
    """Rebuild features for ``n`` moments from the stored log-moments of a row."""
    lm = meta["log_moments"]
    if n > len(lm["arrival"]):
        raise ValueError(f"row stores only {len(lm['arrival'])} moments")
    blocks = [lm["arrival"]] + list(lm["services"])
    return _assemble(blocks, n, float(meta["c"]) if system == "ggc" else None)


def feature_dim(system: str, n: int) -> int:
    return 2 * n + 1 if system == "ggc" else 3 * n


# -- labeling -------------------------------------------------------------------

def instance_meta(spec: QueueSpec, n: int, target_rho: float | None = None, family: str = "ph") -> dict:
    services = canonical_services(spec)
    k = MAX_STORED_MOMENTS
    return {
        "family": family,
        "c": spec.c,
        "target_rho": target_rho,
        "n_moments": n,
        "scv_arrival": dists.scv(spec.arrival),
        "scv_services": [dists.scv(s) for s in services],
        "service_means": [dists.mean(s) for s in services],
        "arrival_mean": dists.mean(spec.arrival),
        "log_moments": {
            "arrival": dists.log_moments(spec.arrival, k).tolist(),
            "services": [dists.log_moments(s, k).tolist() for s in services],
        },
    }


def label(spec: QueueSpec, cfg: SimConfig, idle_rule: str = "random") -> tuple[np.ndarray, dict]:
    """Simulated occupancy label (length ``cfg.l``) and its simulation summary."""
    if spec.heterogeneous:
        res = simulate_hetero(spec, cfg, idle_rule)
    else:
        res = simulate(spec, cfg)
    info = {
        "seed": cfg.seed,
        "tail_mass": res.tail_mass,
        "flagged": res.flagged,
        "measured_rho": res.rho,
        "busy": res.per_server_busy.tolist(),
        "mean_L": res.mean_L,
    }
    return res.probs, info


# -- test set (ii) ----------------------------------------------------------------

def _named(name: str) -> Distribution:
    if name == "M":
        return dists.exponential(1.0)
    if name == "E4":
        return dists.erlang(4, 1.0)
    if name == "H2(4)":
        return dists.fit_h2_balanced(1.0, 4.0)
    if name == "LN(0.25)":
        return dists.lognormal(1.0, 0.25)
    if name == "LN(4)":
        return dists.lognormal(1.0, 4.0)
    if name == "G(4)":
        return dists.gamma(1.0, 4.0)
    raise KeyError(name)


TESTSET2_ARRIVALS = ("E4", "LN(0.25)", "H2(4)", "LN(4)", "G(4)")
TESTSET2_SERVICES = TESTSET2_ARRIVALS + ("M",)
TESTSET2_RHOS = tuple(round(0.01 + 0.05 * i, 2) for i in range(20))


def build_testset2(system: str, rate_split: float = 0.5) -> list[GeneratedSpec]:
    """Parametric benchmark grid.

    ggc: 5 arrival x 6 service families x c in 1..10 x 20 utilisations (6000).
    gg2: 5 x 6 x 6 x 20 (3600); the aggregate rate 1/rho is split between the
    servers as ``rate_split : 1 - rate_split``.
    """
    out = []
    if system == "ggc":
        for a in TESTSET2_ARRIVALS:
            for s in TESTSET2_SERVICES:
                for c in range(1, 11):
                    for rho in TESTSET2_RHOS:
                        svc = dists.scale(_named(s), 1.0 / (c * rho))
                        spec = QueueSpec(_named(a), (svc,), c)
                        out.append(GeneratedSpec(spec, rho, f"{a}/{s}/{c}", (1.0 / (c * rho),)))
    elif system == "gg2":
        for a in TESTSET2_ARRIVALS:
            for s1 in TESTSET2_SERVICES:
                for s2 in TESTSET2_SERVICES:
                    for rho in TESTSET2_RHOS:
                        mu = 1.0 / rho
                        mu1, mu2 = rate_split * mu, (1.0 - rate_split) * mu
                        spec = QueueSpec(_named(a), (dists.scale(_named(s1), mu1), dists.scale(_named(s2), mu2)), 2)
                        out.append(GeneratedSpec(spec, rho, f"{a}/{s1},{s2}/2", (mu1, mu2)))
    else:
        raise ValueError(f"system must be one of {SYSTEMS}")
    return out


# -- datasets ---------------------------------------------------------------------

@dataclass
class Instance:
    index: int
    features: np.ndarray
    label: np.ndarray
    meta: dict = field(default_factory=dict)

    def to_line(self) -> str:
        return json.dumps({
            "index": self.index,
            "features": self.features.tolist(),
            "label": self.label.tolist(),
            "meta": self.meta,
        })


def make_header(system: str, n: int = 4, l: int = 500, **extra) -> dict:
    return {"v": SCHEMA_VERSION, "system": system, "n": n, "l": l, **extra}


def _row_worker(args) -> list[str]:
    system, index, master, cfg, n, ph_config, augment, max_attempts = args
    for attempt in range(max_attempts):
        row_seed = derive_seed(master, index, attempt)
        try:
            gen = (gen_ggc_spec if system == "ggc" else gen_gg2_spec)(row_seed, ph_config)
        except ResampleNeeded:
            continue
        sim_cfg = SimConfig(cfg.num_arrivals, cfg.warmup_fraction, derive_seed(row_seed, 1), cfg.l, cfg.delta)
        probs, info = label(gen.spec, sim_cfg)
        if info["flagged"]:
            continue
        meta = instance_meta(gen.spec, n, gen.target_rho, gen.family)
        meta.update(info, row_seed=row_seed, attempt=attempt)
        rows = [Instance(index, preprocess(gen.spec, n), probs, meta).to_line()]
        if augment and gen.spec.heterogeneous:
            swapped = dict(meta, swapped=True)
            rows.append(Instance(index, preprocess(gen.spec, n, swap=True), probs, swapped).to_line())
        return rows
    raise RuntimeError(f"row {index}: no accepted instance in {max_attempts} attempts")


def _existing_rows(path: Path, header: dict) -> int:
    with path.open() as fh:
        first = fh.readline()
        if not first:
            return -1
        if json.loads(first) != header:
            raise ValueError(f"{path}: header does not match the requested dataset")
        indices = set()
        for line in fh:
            if not line.endswith("\n"):
                break
            indices.add(json.loads(line)["index"])
    return len(indices)


def generate_dataset(
    system: str,
    count: int,
    cfg: SimConfig,
    seed: int,
    out: str | os.PathLike,
    n: int = 4,
    ph_config: PHSamplerConfig | None = None,
    augment_swap: bool = False,
    jobs: int = 1,
    max_attempts: int = 50,
) -> Path:
    """Write ``count`` labeled instances to ``out`` (JSON lines).

    Row ``i`` draws from seeds derived from ``(seed, i, attempt)``; attempts
    that exceed the truncation tolerance are resampled. An existing file with
    the same header is resumed from its last complete row.
    """
    if system not in SYSTEMS:
        raise ValueError(f"system must be one of {SYSTEMS}")
    if count < 1:
        raise ValueError("count must be >= 1")
    path = Path(out)
    header = make_header(system, n, cfg.l, seed=seed, arrivals=cfg.num_arrivals,
                         warmup=cfg.warmup_fraction, augment_swap=augment_swap)
    done = _existing_rows(path, header) if path.exists() else -1
    if done < 0:
        path.write_text(json.dumps(header) + "\n")
        done = 0
    else:
        _truncate_partial(path)
    todo = [(system, i, seed, cfg, n, ph_config, augment_swap, max_attempts) for i in range(done, count)]
    if not todo:
        return path
    with path.open("a") as fh:
        if jobs > 1:
            with ProcessPoolExecutor(jobs) as pool:
                results = pool.map(_row_worker, todo, chunksize=4)
                _write_rows(fh, results, done)
        else:
            _write_rows(fh, map(_row_worker, todo), done)
    return path


def _write_rows(fh, results: Iterable[list[str]], first_index: int):
    for offset, lines in enumerate(results):
        try:
            for line in lines:
                fh.write(line + "\n")
            fh.flush()
        except OSError as exc:
            raise OSError(f"failed writing row {first_index + offset}: {exc}") from exc


def _truncate_partial(path: Path):
    data = path.read_bytes()
    if data and not data.endswith(b"\n"):
        path.write_bytes(data[: data.rfind(b"\n") + 1])


def read_dataset(path: str | os.PathLike) -> tuple[dict, list[Instance]]:
    """Header and rows of a dataset file."""
    rows = []
    header = None
    with open(path) as fh:
        for lineno, line in enumerate(fh):
            obj = json.loads(line)
            if lineno == 0 and "v" in obj and "features" not in obj:
                header = obj
                continue
            rows.append(Instance(obj.get("index", len(rows)), np.asarray(obj["features"], dtype=float),
                                 np.asarray(obj.get("label", []), dtype=float), obj.get("meta", {})))
    if header is not None:
        dim = feature_dim(header["system"], header["n"])
        bad = [r.index for r in rows if r.features.shape[0] != dim]
        if bad:
            raise ValueError(f"{path}: rows {bad[:5]} do not have the declared feature dimension {dim}")
    return header, rows


def iter_jsonl(path: str | os.PathLike) -> Iterator[dict]:
    """Data lines of a JSON-lines file, skipping a schema header if present."""
    with open(path) as fh:
        for lineno, line in enumerate(fh):
            if not line.strip():
                continue
            obj = json.loads(line)
            if lineno == 0 and "v" in obj and not ({"features", "label", "probs"} & obj.keys()):
                continue
            yield obj


def write_specs(specs: Iterable[GeneratedSpec], out: str | os.PathLike, system: str, n: int = 4):
    """Unlabeled benchmark file: one spec per line with features and metadata."""
    with open(out, "w") as fh:
        fh.write(json.dumps(make_header(system, n, kind="specs")) + "\n")
        for i, g in enumerate(specs):
            row = {
                "index": i,
                "features": preprocess(g.spec, n).tolist(),
                "spec": g.spec.to_json(),
                "meta": instance_meta(g.spec, n, g.target_rho, g.family),
            }
            fh.write(json.dumps(row) + "\n")


def file_digest(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
