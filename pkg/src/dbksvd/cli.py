"""Command line entry point: train, encode, eval, synth, bench."""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .core import (
    ConfigError,
    DBKSVDError,
    DimensionMismatch,
    FormatError,
    NonFiniteState,
    SparseCodeMatrix,
    TrainingConfig,
    file_digest,
    load_codes,
    load_matrix,
    store_codes,
    store_matrix,
)
from .driver import DataSource, derive_seed, encode, fit, initialize_dictionary, memory_estimate
from .encoder import build_gram_cache, encode_batch
from .matryoshka import BadPartition
from .metrics import coherence_report, mean_relative_error, variance_explained
from .reference import PlantedSpec, generate_planted
from .updater import inner_batched_update

log = logging.getLogger("dbksvd")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NONFINITE = 0, 2, 3, 4

# flag name -> (type, default); defaults follow the large-scale training setup
TRAIN_KEYS = {
    "data": (str, None),
    "out": (str, "dict.emb1"),
    "atoms": (int, None),
    "sparsity": (int, None),  # required; 20 is the recommended large-scale value
    "iters": (int, 40),
    "batch": (int, 65536),
    "workers": (int, os.cpu_count() or 1),
    "seed": (int, 0),
    "groups": (str, ""),
    "precision": (str, "f32"),
    "validation": (str, None),
    "history": (str, None),
    "manifest": (str, None),
    "codes": (str, None),
}


class UsageError(DBKSVDError):
    pass


def _csv_list(text: str) -> list[int]:
    return [int(t) for t in str(text).replace(" ", "").split(",") if t]


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` file; a JSON run manifest is also accepted (its config block)."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        doc = json.loads(text)
        return {k: ("" if v is None else ",".join(map(str, v)) if isinstance(v, list) else str(v))
                for k, v in doc.get("config", doc).items()}
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def resolve(args: argparse.Namespace, keys: dict) -> dict:
    """Defaults, then config file, then explicit flags."""
    merged = {k: d for k, (_, d) in keys.items()}
    if getattr(args, "config", None):
        for k, v in read_config_file(args.config).items():
            if k in keys:
                merged[k] = None if v in ("", "None") and keys[k][1] is None else keys[k][0](v)
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            merged[k] = v
    return merged


# --------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    opts = resolve(args, TRAIN_KEYS)
    for req in ("data", "atoms", "sparsity"):
        if opts[req] in (None, ""):
            raise UsageError(f"--{req} is required")
    config = TrainingConfig(
        atoms=opts["atoms"], sparsity=opts["sparsity"], batch_size=opts["batch"],
        iterations=opts["iters"], workers=opts["workers"], seed=opts["seed"],
        groups=_csv_list(opts["groups"]), precision=opts["precision"],
    )
    if config.groups:
        from .matryoshka import make_layout

        make_layout(config.atoms, config.sparsity, config.groups)
    out = Path(opts["out"])
    history = Path(opts["history"] or out.with_suffix(".history.csv"))
    manifest_path = Path(opts["manifest"] or out.with_suffix(".manifest.json"))
    data_paths = opts["data"].split(",")
    source = DataSource(data_paths, config.batch_size, seed=derive_seed(config.seed, "data"), dtype=config.dtype)
    validation = load_matrix(opts["validation"], dtype=config.dtype) if opts["validation"] else None

    manifest = {
        "toolkit": "dbksvd",
        "version": __version__,
        "config": {k: opts[k] for k in TRAIN_KEYS},
        "seed": config.seed,
        "inputs": {p: file_digest(p) for p in data_paths + ([opts["validation"]] if opts["validation"] else [])},
        "peak_memory_estimate_bytes": memory_estimate(source.d, config.atoms, config.batch_size, config.workers, config.dtype.itemsize),
        "started": _now(),
        "finished": None,
        "status": "running",
    }
    _write_json(manifest_path, manifest)
    try:
        result = fit(source, config, validation=validation, history_path=history)
    except NonFiniteState:
        manifest.update(status="non-finite", finished=_now())
        _write_json(manifest_path, manifest)
        raise
    store_matrix(out, result.dictionary)
    if opts["codes"] and result.codes is not None:
        store_codes(opts["codes"], result.codes)
    manifest.update(status="ok", finished=_now(), iterations_completed=len(result.history))
    _write_json(manifest_path, manifest)
    return EXIT_OK


def cmd_encode(args) -> int:
    D = load_matrix(args.dict)
    source = DataSource(args.data.split(","), args.batch, dtype=D.dtype)
    if source.d != D.shape[0]:
        raise DimensionMismatch(f"data dimension {source.d} != dictionary dimension {D.shape[0]}")
    codes = encode(D, source, args.sparsity, workers=args.workers)
    store_codes(args.out, codes)
    if args.dense:
        store_matrix(args.dense, codes.to_dense())
    return EXIT_OK


def cmd_eval(args) -> int:
    D = load_matrix(args.dict, dtype=np.float64)
    report = coherence_report(D)
    rows = report.rows()
    if args.data:
        Y = load_matrix(args.data, dtype=np.float64)
        if Y.shape[0] != D.shape[0]:
            raise DimensionMismatch(f"data dimension {Y.shape[0]} != dictionary dimension {D.shape[0]}")
        if args.codes:
            X = load_codes(args.codes)
            if X.shape != (D.shape[1], Y.shape[1]):
                raise DimensionMismatch(f"codes have shape {X.shape}")
        elif args.sparsity:
            X = encode_batch(build_gram_cache(D, Y), args.sparsity, workers=args.workers)
        else:
            raise UsageError("eval with --data needs --codes or --sparsity")
        rows += [("mean_relative_error", mean_relative_error(Y, D, X)),
                 ("variance_explained", variance_explained(Y, D, X))]
    _write_csv(args.out, ["metric", "value"], [(k, _num(v)) for k, v in rows])
    if args.hist:
        e = report.hist_edges
        _write_csv(args.hist, ["bin_lo", "bin_hi", "count"],
                   [(_num(e[i]), _num(e[i + 1]), int(c)) for i, c in enumerate(report.hist_counts)])
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = PlantedSpec(args.d, args.atoms, args.sparsity, args.n, args.sigma_x, args.sigma_noise, args.seed)
    prob = generate_planted(spec)
    prefix = Path(args.out)
    dtype = np.float32 if args.precision == "f32" else np.float64
    files = {
        "data": f"{prefix}_Y.emb1",
        "dictionary": f"{prefix}_D.emb1",
        "codes": f"{prefix}_X.spx1",
    }
    store_matrix(files["data"], prob.data.astype(dtype))
    store_matrix(files["dictionary"], prob.dictionary.astype(dtype))
    store_codes(files["codes"], SparseCodeMatrix.from_dense(prob.codes, spec.k))
    sidecar = {
        "d": spec.d, "m": spec.m, "k": spec.k, "n": spec.n,
        "sigma_x": spec.sigma_x, "sigma_noise": spec.sigma_noise,
        "snr": None if spec.sigma_noise == 0 else spec.snr, "seed": spec.seed, "files": files,
    }
    _write_json(f"{prefix}.json", sidecar)
    return EXIT_OK


def cmd_bench(args) -> int:
    batches = _csv_list(args.batch)
    workers = _csv_list(args.workers)
    if min([args.d, args.atoms, args.sparsity, args.trials] + batches + workers) < 1 or args.sparsity > args.atoms:
        raise UsageError("bench sizes must be positive and sparsity <= atoms")
    rows, summary = run_bench(args.d, args.atoms, args.sparsity, batches, workers, args.trials, args.seed, args.precision)
    _write_csv(args.out, ["phase", "trial", "seconds", "workers", "batch"], rows)
    summary_path = args.summary or (None if args.out in (None, "-") else str(Path(args.out).with_suffix(".summary.csv")))
    header = ["workers", "batch"] + [f"{p}_s" for p in BENCH_PHASES]
    _write_csv(summary_path, header, summary, blank_before=summary_path is None)
    return EXIT_OK


BENCH_PHASES = ("gram", "encode", "gather", "form", "eigen", "update")


def bench_data(d, m, k, n, seed, dtype):
    rng = np.random.default_rng(seed)
    Dtrue = rng.standard_normal((d, m))
    Dtrue /= np.linalg.norm(Dtrue, axis=0)
    atoms = np.argsort(rng.random((n, m)), axis=1)[:, :k] if m * n <= 1 << 26 else _draw_supports(rng, n, m, k)
    X = SparseCodeMatrix(m, atoms, rng.standard_normal((n, k)))
    Y = X.reconstruct(Dtrue) + 0.01 * rng.standard_normal((d, n))
    return np.asfortranarray(Y, dtype=dtype)


def _draw_supports(rng, n, m, k):
    out = np.empty((n, k), dtype=np.int64)
    for s in range(n):
        out[s] = rng.choice(m, size=k, replace=False)
    return out


def run_bench(d, m, k, batches, workers, trials, seed=0, precision="f32"):
    """Time single DB-KSVD iterations; returns per-trial rows and per-config minima."""
    dtype = np.float32 if precision == "f32" else np.float64
    rows, summary = [], []
    D0 = initialize_dictionary(d, m, derive_seed(seed, "init"), dtype=dtype)
    for n_b in batches:
        Y = bench_data(d, m, k, n_b, derive_seed(seed, "bench", n_b), dtype)
        for w in workers:
            best = {p: float("inf") for p in BENCH_PHASES}
            for trial in range(trials):
                t0 = time.perf_counter()
                cache = build_gram_cache(D0, Y)
                t1 = time.perf_counter()
                X = encode_batch(cache, k, workers=w)
                t2 = time.perf_counter()
                timings = {}
                inner_batched_update(D0, X, Y, workers=w, rng=np.random.default_rng(seed), timings=timings)
                t3 = time.perf_counter()
                phases = {"gram": t1 - t0, "encode": t2 - t1, "gather": timings["gather"],
                          "form": timings["form"], "eigen": timings["eigen"], "update": t3 - t2}
                for p in BENCH_PHASES:
                    rows.append((p, trial, _num(phases[p]), w, n_b))
                    best[p] = min(best[p], phases[p])
                log.info("bench w=%d n_b=%d trial %d: %s", w, n_b, trial, phases)
            summary.append([w, n_b] + [_num(best[p]) for p in BENCH_PHASES])
    return rows, summary


# --------------------------------------------------------------------------
# plumbing


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _num(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return str(int(v)) if v.is_integer() and abs(v) < 2**53 else repr(v)


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv(path, header, rows, blank_before=False) -> None:
    if path in (None, "-"):
        if blank_before:
            sys.stdout.write("\n")
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        sys.stdout.flush()
        return
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dbksvd", description="Double-batch KSVD dictionary learning.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="learn a dictionary")
    t.add_argument("--config", help="flat key = value file (flags override it)")
    for key, (typ, _) in TRAIN_KEYS.items():
        t.add_argument(f"--{key}", type=typ, default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("encode", help="sparse-code data with a fixed dictionary")
    e.add_argument("--dict", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--sparsity", type=int, required=True)
    e.add_argument("--batch", type=int, default=65536)
    e.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    e.add_argument("--out", required=True, help="SPX1 output")
    e.add_argument("--dense", help="also write a dense EMB1 export")
    e.set_defaults(func=cmd_encode)

    v = sub.add_parser("eval", help="coherence and reconstruction metrics")
    v.add_argument("--dict", required=True)
    v.add_argument("--data")
    v.add_argument("--codes")
    v.add_argument("--sparsity", type=int)
    v.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    v.add_argument("--out", default="-")
    v.add_argument("--hist", help="histogram CSV of per-atom coherence")
    v.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="write a planted problem")
    s.add_argument("--d", type=int, required=True)
    s.add_argument("--atoms", type=int, required=True)
    s.add_argument("--sparsity", type=int, required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--sigma-x", type=float, default=1.0)
    s.add_argument("--sigma-noise", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--precision", choices=("f32", "f64"), default="f64")
    s.add_argument("--out", required=True, help="output prefix")
    s.set_defaults(func=cmd_synth)

    b = sub.add_parser("bench", help="time single iterations per phase")
    b.add_argument("--d", type=int, default=512)
    b.add_argument("--atoms", type=int, default=2048)
    b.add_argument("--sparsity", type=int, default=20)
    b.add_argument("--batch", default="32768", help="comma list")
    b.add_argument("--workers", default="1", help="comma list")
    b.add_argument("--trials", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--precision", choices=("f32", "f64"), default="f32")
    b.add_argument("--out", default="-")
    b.add_argument("--summary")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("DBKSVD_LOG", "WARNING").upper(),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError, BadPartition, DimensionMismatch, ValueError) as exc:
        parser.print_usage(sys.stderr)
        print(f"dbksvd {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteState as exc:
        print(f"dbksvd {args.command}: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except (FormatError, OSError) as exc:
        print(f"dbksvd {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
