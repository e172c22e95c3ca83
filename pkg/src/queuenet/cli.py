"""Command-line entry point: ``queuenet <subcommand> ...``.

Every subcommand that writes ``--out FILE`` also writes ``FILE.manifest.json``
recording the argument vector, the input and output digests and timestamps.
``queuenet replay --manifest FILE.manifest.json`` reruns the command into a
scratch directory and checks the outputs are byte-identical.

Failures print one JSON object ``{"error": ..., "message": ...}`` on stderr
and exit with status 1; malformed command lines exit with status 2.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, baselines, datagen, designopt, dists, metrics, neuralnet, simqueue

log = logging.getLogger("queuenet")

JOBS_ENV = "QUEUENET_JOBS"
MANIFEST_VERSION = 1
INPUT_DESTS = ("spec", "data", "model", "in_path", "truth", "pred", "meta", "arrival", "service_shape")


class CLIError(Exception):
    """Validation failure reported with exit status 1."""


# -- helpers -----------------------------------------------------------------------

def _default_jobs() -> int:
    try:
        return max(1, int(os.environ.get(JOBS_ENV, "1")))
    except ValueError:
        return 1


def _csv_floats(text: str) -> tuple:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _dump(obj, out: str | None):
    text = json.dumps(obj) + "\n"
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _read_json_or_lines(path: str) -> tuple[dict | None, list[dict]]:
    """A single JSON object, or the data rows of a JSON-lines file."""
    text = Path(path).read_text()
    try:
        obj = json.loads(text)
        if isinstance(obj, dict):
            return obj, []
    except json.JSONDecodeError:
        pass
    return None, list(datagen.iter_jsonl(path))


def _load_dist(path: str) -> dists.Distribution:
    obj, _ = _read_json_or_lines(path)
    if obj is None:
        raise CLIError(f"{path}: expected one distribution object")
    return dists.from_json(obj)


def _sim_config(args) -> simqueue.SimConfig:
    return simqueue.SimConfig(num_arrivals=args.arrivals, warmup_fraction=args.warmup, seed=args.seed, l=args.l)


# -- subcommands -------------------------------------------------------------------

def cmd_gen_data(args):
    cfg = simqueue.SimConfig(num_arrivals=args.arrivals, warmup_fraction=args.warmup, l=args.l)
    datagen.generate_dataset(args.system, args.count, cfg, args.seed, args.out, n=args.n,
                             augment_swap=args.augment_swap, jobs=args.jobs)


def cmd_testset2(args):
    specs = datagen.build_testset2(args.system, rate_split=args.rate_split)
    datagen.write_specs(specs, args.out, args.system, n=args.n)


def _simulate_row(task):
    i, spec_obj, cfg, idle_rule = task
    spec = simqueue.QueueSpec.from_json(spec_obj)
    if spec.heterogeneous:
        res = simqueue.simulate_hetero(spec, cfg, idle_rule)
    else:
        res = simqueue.simulate(spec, cfg)
    return {"index": i, **res.to_json(), "flagged": res.flagged}


def cmd_simulate(args):
    single, rows = _read_json_or_lines(args.spec)
    cfg = _sim_config(args)
    if single is not None:
        out = _simulate_row((0, single.get("spec", single), cfg, args.idle_rule))
        out.pop("index")
        _dump(out, args.out)
        return
    if not rows:
        raise CLIError(f"{args.spec}: no specs found")
    tasks = []
    for k, row in enumerate(rows):
        i = int(row.get("index", k))
        row_cfg = simqueue.SimConfig(cfg.num_arrivals, cfg.warmup_fraction, datagen.derive_seed(args.seed, i), cfg.l)
        tasks.append((i, row["spec"], row_cfg, args.idle_rule))
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_simulate_row, tasks, chunksize=4))
    else:
        results = [_simulate_row(t) for t in tasks]
    lines = [json.dumps({"v": datagen.SCHEMA_VERSION, "kind": "sim", "l": cfg.l, "seed": args.seed})]
    lines += [json.dumps(r) for r in results]
    text = "\n".join(lines) + "\n"
    if args.out is None:
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text)


def cmd_exact_mmc(args):
    if not args.lam < args.c * args.mu:
        raise CLIError(f"unstable queue: lambda={args.lam} >= c*mu={args.c * args.mu}")
    probs, tail = simqueue.mmc_distribution(args.lam, args.mu, args.c, args.l)
    wait = baselines.erlang_c(baselines.TwoMomentSpec(args.lam, args.mu, args.c))
    _dump({"probs": probs.tolist(), "tail_mass": tail, "wait_probability": wait,
           "mean_L": simqueue.mmc_mean_L(args.lam, args.mu, args.c)}, args.out)


def cmd_train(args):
    header, rows = datagen.read_dataset(args.data)
    if not rows:
        raise CLIError(f"{args.data}: no rows")
    system = header["system"] if header else ("gg2" if len(rows[0].meta.get("scv_services", [])) == 2 else "ggc")
    n = args.n_moments or (header["n"] if header else None)
    if header and n != header["n"]:
        X = np.stack([datagen.features_from_meta(r.meta, n, system) for r in rows])
    else:
        X = np.stack([r.features for r in rows])
    Y = np.stack([r.label for r in rows])
    cfg = neuralnet.TrainConfig(batch=args.batch, lr=args.lr, epochs=args.epochs, seed=args.seed,
                                patience=args.patience, val_fraction=args.val_fraction,
                                n_moments=n or 4, hidden=tuple(args.hidden))
    result = neuralnet.train(X, Y, cfg)
    neuralnet.save_model(result.params, args.out)
    best = result.history[result.best_epoch]
    log.info("best epoch %d, validation SAE %.5f", result.best_epoch, best["val_sae"])
    return {"best_epoch": result.best_epoch, "val_sae": best["val_sae"], "epochs_run": len(result.history)}


def _features_for_model(rows: list[dict], input_dim: int, system: str | None) -> np.ndarray:
    X = []
    for k, row in enumerate(rows):
        f = np.asarray(row["features"], dtype=float) if "features" in row else None
        if f is None or f.shape[0] != input_dim:
            meta = row.get("meta")
            if meta is None:
                raise CLIError(f"row {k}: feature dimension does not match the model ({input_dim})")
            sys_ = system or ("gg2" if len(meta["scv_services"]) == 2 else "ggc")
            n = (input_dim - 1) // 2 if sys_ == "ggc" else input_dim // 3
            f = datagen.features_from_meta(meta, n, sys_)
        X.append(f)
    return np.stack(X)


def cmd_infer(args):
    params = neuralnet.load_model(args.model)
    _, rows = _read_json_or_lines(args.in_path)
    if not rows:
        raise CLIError(f"{args.in_path}: no feature rows")
    X = _features_for_model(rows, params.input_dim, None)
    P = neuralnet.infer_batch(params, X)
    with open(args.out, "w") as fh:
        fh.write(json.dumps({"v": datagen.SCHEMA_VERSION, "kind": "pred", "l": int(P.shape[1])}) + "\n")
        for k, (row, p) in enumerate(zip(rows, P)):
            fh.write(json.dumps({"index": int(row.get("index", k)), "probs": [float(x) for x in p]}) + "\n")


def _truth_matrix(rows: list[dict], path: str) -> np.ndarray:
    key = "label" if rows and "label" in rows[0] else "probs"
    try:
        return np.stack([np.asarray(r[key], dtype=float) for r in rows])
    except KeyError as exc:
        raise CLIError(f"{path}: rows carry neither 'label' nor 'probs'") from exc


def _prediction(rows: list[dict], path: str) -> np.ndarray:
    if rows and "probs" in rows[0]:
        return np.stack([np.asarray(r["probs"], dtype=float) for r in rows])
    if rows and "mean_L" in rows[0]:
        return np.array([float(r["mean_L"]) for r in rows])
    if rows and "label" in rows[0]:
        return np.stack([np.asarray(r["label"], dtype=float) for r in rows])
    raise CLIError(f"{path}: rows carry neither 'probs' nor 'mean_L'")


def cmd_evaluate(args):
    _, truth_rows = _read_json_or_lines(args.truth)
    Y = _truth_matrix(truth_rows, args.truth)
    if args.meta:
        _, meta_rows = _read_json_or_lines(args.meta)
    else:
        meta_rows = truth_rows
    if len(meta_rows) != len(truth_rows):
        raise CLIError(f"row counts differ: {len(truth_rows)} truth rows vs {len(meta_rows)} metadata rows")
    metas = []
    for k, (m, t) in enumerate(zip(meta_rows, truth_rows)):
        if "meta" not in m:
            raise CLIError(f"{args.meta or args.truth}: row {k} has no 'meta'")
        meta = dict(m["meta"])
        if "busy" in t and "measured_rho" not in meta:
            meta["measured_rho"] = float(np.mean(t["busy"]))
        metas.append(meta)
    system = args.system or ("gg2" if len(metas[0]["scv_services"]) == 2 else "ggc")
    preds = {}
    for item in args.pred:
        name, _, path = item.rpartition("=")
        name = name or "nn"
        _, rows = _read_json_or_lines(path)
        if len(rows) != len(truth_rows):
            raise CLIError(f"row counts differ: {len(truth_rows)} truth rows vs {len(rows)} rows in {path}")
        preds[name] = _prediction(rows, path)
    table = metrics.report(Y, preds, metas, system, args.percentiles, args.rem_denominator)
    Path(args.out).write_text(metrics.report_csv(table, system, list(preds), args.percentiles))


def cmd_baseline(args):
    if args.meta:
        _, rows = _read_json_or_lines(args.meta)
        out = [json.dumps({"v": datagen.SCHEMA_VERSION, "kind": "baseline", "variant": args.variant})]
        for k, row in enumerate(rows):
            m = row["meta"]
            if len(m["scv_services"]) != 1:
                raise CLIError(f"row {k}: baselines cover homogeneous queues only")
            spec = baselines.TwoMomentSpec(1.0 / m["arrival_mean"], 1.0 / m["service_means"][0], int(m["c"]),
                                           m["scv_arrival"], m["scv_services"][0])
            try:
                value = baselines.mean_L(spec, args.variant)
            except baselines.InfeasibleSpec:
                value = float("nan")
            out.append(json.dumps({"index": int(row.get("index", k)), "mean_L": value}))
        text = "\n".join(out) + "\n"
        if args.out is None:
            sys.stdout.write(text)
        else:
            Path(args.out).write_text(text)
        return
    if args.mu is None or args.c is None:
        raise CLIError("--mu and --c are required without --meta")
    spec = baselines.TwoMomentSpec(args.lam, args.mu, args.c, args.ca2, args.cs2)
    _dump({"variant": args.variant, "mean_L": baselines.mean_L(spec, args.variant)}, args.out)


def _sim_cell(task):
    arrival, shape, rate, c, cfg = task
    return designopt.sim_evaluator(arrival, shape, cfg)(np.array([rate]), np.array([c]))[0]


def cmd_optimize(args):
    spec = designopt.CostSpec(c1_base=args.c1_base, c1_exponent=args.c1_exponent, C2=args.c2,
                              rate_min=args.rate_min, rate_max=args.rate_max, rate_step=args.rate_step,
                              c_max=args.c_max, lam=args.lam, queue_only=args.queue_only)
    evaluator = args.evaluator or ("nn" if args.model else "mmc")
    if evaluator == "mmc":
        ev = designopt.mmc_evaluator(args.lam)
    else:
        if args.arrival is None or args.service_shape is None:
            raise CLIError(f"the {evaluator} evaluator needs --arrival and --service-shape")
        arrival, shape = _load_dist(args.arrival), _load_dist(args.service_shape)
        if abs(dists.mean(arrival) * args.lam - 1.0) > 1e-9:
            arrival = dists.scale(arrival, dists.mean(arrival) * args.lam)
        if evaluator == "nn":
            if args.model is None:
                raise CLIError("the nn evaluator needs --model")
            ev = designopt.nn_evaluator(neuralnet.load_model(args.model), arrival, shape)
        else:
            cfg = _sim_config(args)

            def ev(rates, cs):
                tasks = [(arrival, shape, float(r), int(c), cfg) for r, c in zip(rates, cs)]
                if args.jobs > 1:
                    with ProcessPoolExecutor(args.jobs) as pool:
                        return np.array(list(pool.map(_sim_cell, tasks, chunksize=8)))
                return np.array([_sim_cell(t) for t in tasks])
    res = designopt.brute_force(ev, spec)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "rate", "c", "EL", "cost"])
        for i, r in enumerate(res.rates):
            for j, c in enumerate(res.servers):
                el, cst = res.EL_surface[i, j], res.surface[i, j]
                w.writerow(["cell", f"{r:.6g}", int(c), f"{el:.6f}" if np.isfinite(el) else "nan",
                            f"{cst:.6f}" if np.isfinite(cst) else "nan"])
        w.writerow(["optimum", f"{res.rate:.6g}", res.c, f"{res.EL:.6f}", f"{res.cost:.6f}"])
    return {"rate": res.rate, "c": res.c, "cost": res.cost, "EL": res.EL, "cells": res.n_cells}


def cmd_ci(args):
    single, _ = _read_json_or_lines(args.spec)
    if single is None:
        raise CLIError(f"{args.spec}: expected one queue spec object")
    spec = simqueue.QueueSpec.from_json(single.get("spec", single))
    ci = simqueue.replication_ci(spec, _sim_config(args), args.reps, confidence=args.confidence)
    _dump(ci.to_json(), args.out)


# -- manifests ---------------------------------------------------------------------

def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


def manifest_path(out: str | os.PathLike) -> Path:
    return Path(f"{out}.manifest.json")


def _flags(args) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(args).items() if k != "func"}


def write_manifest(args, argv, started, finished, extra=None) -> Path:
    inputs = {}
    for dest in INPUT_DESTS:
        value = getattr(args, dest, None)
        paths = value if isinstance(value, list) else [value]
        for p in paths:
            if p is None:
                continue
            p = p.rpartition("=")[2]
            if Path(p).is_file():
                inputs[p] = datagen.file_digest(p)
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "tool_version": __version__,
        "command": args.command,
        "argv": list(argv),
        "cwd": os.getcwd(),
        "flags": _flags(args),
        "seed": getattr(args, "seed", None),
        "schema": {"dataset": datagen.SCHEMA_VERSION, "model": neuralnet.MODEL_VERSION},
        "started": started,
        "finished": finished,
        "inputs": inputs,
        "outputs": {args.out: datagen.file_digest(args.out)},
    }
    if extra:
        manifest["result"] = extra
    path = manifest_path(args.out)
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def cmd_replay(args):
    manifest = json.loads(Path(args.manifest).read_text())
    outdir = Path(args.outdir or tempfile.mkdtemp(prefix="queuenet-replay-")).resolve()
    outdir.mkdir(parents=True, exist_ok=True)
    parser = build_parser()
    sub = parser.parse_args(manifest["argv"])
    (orig_out, want), = manifest["outputs"].items()
    new_out = outdir / Path(orig_out).name
    sub.out = str(new_out)
    cwd = os.getcwd()
    os.chdir(manifest["cwd"])
    try:
        changed = [p for p, d in manifest["inputs"].items() if not Path(p).is_file() or datagen.file_digest(p) != d]
        if changed:
            raise CLIError(f"inputs changed since the manifest was written: {changed}")
        sub.func(sub)
    finally:
        os.chdir(cwd)
    got = datagen.file_digest(new_out)
    record = {"output": str(new_out), "expected": want, "actual": got, "identical": got == want}
    _dump(record, None)
    if got != want:
        raise CLIError(f"replayed output {new_out} differs from the recorded digest")


# -- parser ------------------------------------------------------------------------

def _add_sim_flags(p, arrivals=1_000_000):
    p.add_argument("--arrivals", type=int, default=arrivals)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--l", type=int, default=500)
    p.add_argument("--warmup", type=float, default=0.01)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="queuenet", description="Queue occupancy simulation and neural surrogates")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    jobs = argparse.ArgumentParser(add_help=False)
    jobs.add_argument("--jobs", type=int, default=_default_jobs(),
                      help=f"worker processes (default from ${JOBS_ENV}, else 1)")

    p = sub.add_parser("gen-data", parents=[jobs], help="generate a labeled training set")
    p.add_argument("--system", choices=datagen.SYSTEMS, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--arrivals", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--l", type=int, default=500)
    p.add_argument("--warmup", type=float, default=0.01)
    p.add_argument("--n", type=int, default=4, help="moments per distribution in the features")
    p.add_argument("--augment-swap", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("testset2", help="write the named-family benchmark specs")
    p.add_argument("--system", choices=datagen.SYSTEMS, required=True)
    p.add_argument("--rate-split", type=float, default=0.5,
                   help="share of the total service rate given to the faster server (gg2)")
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_testset2)

    p = sub.add_parser("simulate", parents=[jobs], help="simulate one spec or a spec file")
    p.add_argument("--spec", required=True)
    _add_sim_flags(p)
    p.add_argument("--idle-rule", choices=simqueue.IDLE_RULES, default="random")
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("exact-mmc", help="exact M/M/c occupancy distribution")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--mu", type=float, required=True)
    p.add_argument("--c", type=int, required=True)
    p.add_argument("--l", type=int, default=500)
    p.add_argument("--out")
    p.set_defaults(func=cmd_exact_mmc)

    p = sub.add_parser("train", help="train a surrogate on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--n-moments", type=int, default=None)
    p.add_argument("--hidden", type=lambda s: tuple(int(x) for x in s.split(",")),
                   default=neuralnet.DEFAULT_HIDDEN)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict distributions for feature rows")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="per-group PARE/REM report")
    p.add_argument("--truth", required=True)
    p.add_argument("--pred", required=True, action="append", help="[NAME=]FILE, repeatable")
    p.add_argument("--meta")
    p.add_argument("--out", required=True)
    p.add_argument("--percentiles", type=_csv_floats, default=metrics.DEFAULT_PERCENTILES)
    p.add_argument("--system", choices=datagen.SYSTEMS)
    p.add_argument("--rem-denominator", choices=("pred", "true"), default="pred")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("baseline", help="two-moment mean-queue-length approximations")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--mu", type=float)
    p.add_argument("--c", type=int)
    p.add_argument("--ca2", type=float, default=1.0)
    p.add_argument("--cs2", type=float, default=1.0)
    p.add_argument("--variant", choices=baselines.VARIANTS, default="allen_cunneen")
    p.add_argument("--meta", help="JSON-lines rows with 'meta'; emits one mean per row")
    p.add_argument("--out")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("optimize", parents=[jobs], help="grid search over service rate and server count")
    p.add_argument("--model")
    p.add_argument("--evaluator", choices=("nn", "mmc", "sim"))
    p.add_argument("--arrival")
    p.add_argument("--service-shape")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--rate-min", type=float, default=0.1)
    p.add_argument("--rate-max", type=float, default=0.3)
    p.add_argument("--rate-step", type=float, default=0.001)
    p.add_argument("--c-max", type=int, default=10)
    p.add_argument("--c1-base", type=float, default=500.0)
    p.add_argument("--c1-exponent", type=float, default=5.0)
    p.add_argument("--c2", type=float, default=100.0)
    p.add_argument("--queue-only", action="store_true", help="charge waiting jobs only")
    _add_sim_flags(p, arrivals=200_000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("ci", help="replication confidence interval for the mean number in system")
    p.add_argument("--spec", required=True)
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--confidence", type=float, default=0.95)
    _add_sim_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ci)

    p = sub.add_parser("replay", help="rerun a manifest and compare output digests")
    p.add_argument("--manifest", required=True)
    p.add_argument("--outdir")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    sub_argv = argv[argv.index(args.command) + 1:]
    # the manifest stores the subcommand line so replay can re-parse it
    sub_argv = [args.command] + sub_argv
    started = _now()
    try:
        extra = args.func(args)
        if getattr(args, "out", None) and args.command != "replay":
            write_manifest(args, sub_argv, started, _now(), extra)
    except (CLIError, ValueError, OSError, KeyError, RuntimeError, json.JSONDecodeError) as exc:
        record = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        sys.stderr.write(json.dumps(record) + "\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
