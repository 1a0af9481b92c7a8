"""DB-KSVD outer loop: initialization, outer mini-batches, history."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import time
from dataclasses import astuple, dataclass, field, fields
from pathlib import Path

import numpy as np

from .core import (
    DimensionMismatch,
    NonFiniteState,
    SparseCodeMatrix,
    TrainingConfig,
    load_matrix,
    matrix_shape,
    normalize_columns,
)
from .encoder import build_gram_cache, encode_batch
from .matryoshka import make_layout, matryoshka_iteration
from .metrics import mean_relative_error, variance_explained
from .updater import inner_batched_update

log = logging.getLogger(__name__)

HISTORY_HEADER = ["iter", "batch", "mre_train", "varexp_train", "mre_val", "varexp_val", "encode_s", "update_s"]


def derive_seed(base: int, *labels) -> int:
    """Stable 63-bit seed for a labelled subsystem of a run."""
    digest = hashlib.sha256(repr((int(base),) + labels).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def initialize_dictionary(d: int, m: int, seed: int, dtype=np.float64) -> np.ndarray:
    """Entries i.i.d. U(-1/2, 1/2), columns normalized."""
    if d < 1 or m < 1:
        raise ValueError("need d >= 1 and m >= 1")
    rng = np.random.default_rng(seed)
    while True:
        A = rng.uniform(-0.5, 0.5, size=(d, m))
        if np.all(np.linalg.norm(A, axis=0) >= 1e-12):
            return normalize_columns(A, dtype=dtype)


# --------------------------------------------------------------------------
# data


class DataSource:
    """Samples from EMB1 files and/or in-memory arrays, served in batches.

    Every input is cut into consecutive windows of ``batch_size`` samples
    (windows never straddle two inputs).  The first training epoch walks the
    windows in order; each later epoch draws a fresh sample-level
    permutation of the training pool, seeded from (seed, epoch), and serves
    it in chunks of ``batch_size``.
    """

    def __init__(self, items, batch_size: int, seed: int = 0, dtype=np.float32):
        if isinstance(items, (str, Path, np.ndarray)):
            items = [items]
        self.items = list(items)
        self.batch_size = int(batch_size)
        self.seed = seed
        self.dtype = np.dtype(dtype)
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        shapes = [it.shape if isinstance(it, np.ndarray) else matrix_shape(it) for it in self.items]
        dims = {s[0] for s in shapes}
        if len(dims) > 1:
            raise DimensionMismatch(f"inputs disagree on dimension: {sorted(dims)}")
        self.d = dims.pop() if dims else 0
        self.n = sum(s[1] for s in shapes)
        self._offsets = np.concatenate(([0], np.cumsum([s[1] for s in shapes]))).astype(np.int64)
        self.windows = [
            (i, lo, min(lo + self.batch_size, cols))
            for i, (_, cols) in enumerate(shapes)
            for lo in range(0, cols, self.batch_size)
        ]

    def __len__(self) -> int:
        return len(self.windows)

    def load(self, w: int) -> np.ndarray:
        i, lo, hi = self.windows[w]
        return self._read(i, lo, hi)

    def _read(self, i, lo, hi) -> np.ndarray:
        item = self.items[i]
        if isinstance(item, np.ndarray):
            return np.array(item[:, lo:hi], dtype=self.dtype, order="F")
        return load_matrix(item, dtype=self.dtype, col_start=lo, col_stop=hi)

    def gather(self, samples: np.ndarray) -> np.ndarray:
        """Columns for global sample ids, in the order given."""
        samples = np.asarray(samples, dtype=np.int64)
        out = np.empty((self.d, samples.size), dtype=self.dtype, order="F")
        item_of = np.searchsorted(self._offsets, samples, side="right") - 1
        for i in np.unique(item_of):
            pos = np.flatnonzero(item_of == i)
            local = samples[pos] - self._offsets[i]
            item = self.items[i]
            if isinstance(item, np.ndarray):
                out[:, pos] = item[:, local]
                continue
            # read contiguous runs of the sorted local ids
            order = np.argsort(local, kind="stable")
            sorted_ids = local[order]
            breaks = np.flatnonzero(np.diff(sorted_ids) != 1) + 1
            for run in np.split(np.arange(sorted_ids.size), breaks):
                lo, hi = int(sorted_ids[run[0]]), int(sorted_ids[run[-1]]) + 1
                out[:, pos[order[run]]] = self._read(i, lo, hi)
        return out

    def window_samples(self, w: int) -> np.ndarray:
        i, lo, hi = self.windows[w]
        return np.arange(lo, hi) + self._offsets[i]

    def schedule(self, iterations: int, exclude=()) -> list["Batch"]:
        """Batches for each iteration, cycling through reshuffled epochs."""
        exclude = set(exclude)
        pool = [w for w in range(len(self)) if w not in exclude] or list(range(len(self)))
        out, epoch = [], 0
        while len(out) < iterations:
            if epoch == 0:
                out.extend(Batch(w, window=w) for w in pool)
            else:
                ids = np.concatenate([self.window_samples(w) for w in pool])
                rng = np.random.default_rng(derive_seed(self.seed, "epoch", epoch))
                ids = ids[rng.permutation(ids.size)]
                for c, lo in enumerate(range(0, ids.size, self.batch_size)):
                    out.append(Batch(epoch * len(pool) + c, samples=ids[lo : lo + self.batch_size]))
            epoch += 1
        return out[:iterations]

    def load_batch(self, batch: "Batch") -> np.ndarray:
        return self.load(batch.window) if batch.window is not None else self.gather(batch.samples)


@dataclass
class Batch:
    id: int
    window: int | None = None
    samples: np.ndarray | None = None


# --------------------------------------------------------------------------
# history


@dataclass
class IterationRecord:
    iter: int
    batch: int
    mre_train: float
    varexp_train: float
    mre_val: float
    varexp_val: float
    encode_s: float
    update_s: float


@dataclass
class TrainingHistory:
    records: list[IterationRecord] = field(default_factory=list)
    path: Path | None = None

    def __post_init__(self):
        if self.path is not None:
            self.path = Path(self.path)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(HISTORY_HEADER)

    def append(self, rec: IterationRecord) -> None:
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(_fmt_row(rec))

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    @staticmethod
    def read_csv(path) -> "TrainingHistory":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        types = {f.name: f.type for f in fields(IterationRecord)}
        recs = [IterationRecord(**{k: (int(v) if types[k] in ("int", int) else float(v)) for k, v in r.items()}) for r in rows]
        return TrainingHistory(recs)


def _fmt_row(rec: IterationRecord) -> list[str]:
    return [repr(v) if isinstance(v, float) else str(v) for v in astuple(rec)]


@dataclass
class FitResult:
    dictionary: np.ndarray
    history: TrainingHistory
    codes: SparseCodeMatrix | None
    last_batch: int | None


# --------------------------------------------------------------------------
# training


def evaluate(Y: np.ndarray, D: np.ndarray, k: int, workers: int = 1, max_steps=None):
    """Encode Y with the full dictionary; return (codes, mre, variance explained)."""
    codes = encode_batch(build_gram_cache(D, Y), k, workers=workers, max_steps=max_steps)
    return codes, mean_relative_error(Y, D, codes), variance_explained(Y, D, codes)


def dbksvd_iteration(Y, D, config: TrainingConfig, rng, timings=None):
    """One plain iteration: encode the batch, then an inner-batched sweep."""
    if config.groups:
        return matryoshka_iteration(
            Y, D, make_layout(config.atoms, config.sparsity, config.groups),
            workers=config.workers, rng=rng, max_steps=config.mp_max_steps,
            lanczos_tol=config.lanczos_tol, lanczos_max_iters=config.lanczos_max_iters, timings=timings,
        )
    t0 = time.perf_counter()
    cache = build_gram_cache(D, Y)
    X = encode_batch(cache, config.sparsity, workers=config.workers, max_steps=config.mp_max_steps)
    if timings is not None:
        timings["encode"] = timings.get("encode", 0.0) + time.perf_counter() - t0
    return inner_batched_update(
        D, X, Y, workers=config.workers, rng=rng,
        tol=config.lanczos_tol, max_iters=config.lanczos_max_iters, timings=timings,
    )


def fit(
    source: DataSource,
    config: TrainingConfig,
    validation: np.ndarray | None = None,
    history_path=None,
    init: np.ndarray | None = None,
) -> FitResult:
    """Train a dictionary with T outer iterations over the source's batches.

    Without an explicit ``validation`` matrix the first window is held out
    (and excluded from training whenever other windows exist).  After each
    iteration both the training batch and the validation batch are encoded
    with the updated dictionary to record the proxy metrics; the codes of
    the final training batch are returned.
    """
    config.validate()
    if source.d < 1 or len(source) == 0:
        raise ValueError("data source is empty")
    dtype = config.dtype
    if init is None:
        D = initialize_dictionary(source.d, config.atoms, derive_seed(config.seed, "init"), dtype=dtype)
    else:
        if init.shape != (source.d, config.atoms):
            raise DimensionMismatch(f"initial dictionary has shape {init.shape}")
        D = np.array(init, dtype=dtype, order="F")
    history = TrainingHistory(path=history_path)
    if config.iterations == 0:
        return FitResult(D, history, None, None)

    exclude = ()
    if validation is None:
        Yval = source.load(0)
        exclude = (0,) if len(source) > 1 else ()
    else:
        Yval = np.array(validation, dtype=dtype, order="F")
        if Yval.shape[0] != source.d:
            raise DimensionMismatch("validation data has the wrong dimension")
    rng = np.random.default_rng(derive_seed(config.seed, "update"))
    schedule = source.schedule(config.iterations, exclude)
    codes = None
    for t, batch in enumerate(schedule, start=1):
        Y = source.load_batch(batch).astype(dtype, copy=False)
        timings: dict = {}
        t0 = time.perf_counter()
        D, _ = dbksvd_iteration(Y, D, config, rng, timings)
        elapsed = time.perf_counter() - t0
        codes, mre_tr, ve_tr = evaluate(Y, D, config.sparsity, config.workers, config.mp_max_steps)
        _, mre_va, ve_va = evaluate(Yval, D, config.sparsity, config.workers, config.mp_max_steps)
        enc = timings.get("encode", 0.0)
        rec = IterationRecord(t, batch.id, mre_tr, ve_tr, mre_va, ve_va, enc, elapsed - enc)
        if not all(math.isfinite(v) for v in (mre_tr, ve_tr, mre_va, ve_va)) or not np.isfinite(D).all():
            raise NonFiniteState(f"non-finite state at iteration {t}")
        history.append(rec)
        log.info("iter %d batch %d mre %.5f varexp %.5f (val %.5f / %.5f)", t, batch.id, mre_tr, ve_tr, mre_va, ve_va)
        if config.early_stop and _stalled(history, config):
            log.info("early stop at iteration %d", t)
            break
    return FitResult(D, history, codes, schedule[len(history) - 1].id)


def _stalled(history: TrainingHistory, config: TrainingConfig) -> bool:
    n = config.early_stop_window
    if len(history) <= n:
        return False
    mre = history.column("mre_train")
    return mre[-1 - n] - mre[-1] < config.early_stop_tol


def encode(D: np.ndarray, source: DataSource, k: int, workers: int = 1, max_steps=None) -> SparseCodeMatrix:
    """Encode every sample of ``source`` (window by window) with a frozen dictionary."""
    if len(source) and source.d != D.shape[0]:
        raise DimensionMismatch(f"data dim {source.d} != dictionary dim {D.shape[0]}")
    parts = []
    for w in range(len(source)):
        Y = source.load(w).astype(D.dtype, copy=False)
        parts.append(encode_batch(build_gram_cache(D, Y), k, workers=workers, max_steps=max_steps))
    return SparseCodeMatrix.hstack(parts, m=D.shape[1]) if parts else SparseCodeMatrix.empty(D.shape[1], 0, k)


def memory_estimate(d: int, m: int, n_b: int, workers: int = 1, itemsize: int = 4) -> int:
    """Bytes: program-level d(m + n_b) + m^2 + m n_b, plus w (d n_b + d^2) worker scratch."""
    program = d * (m + n_b) + m * m + m * n_b
    per_worker = d * n_b + d * d
    return itemsize * (program + workers * per_worker)
