"""Shared types, errors and the EMB1/SPX1 binary containers.

Dense matrices are plain 2-D numpy arrays kept in Fortran (column-major)
order; a dictionary is such an array whose columns have unit norm.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

NORM_EPS = 1e-12
UNIT_NORM_TOL = 1e-6

EMB_MAGIC = b"EMB1"
SPX_MAGIC = b"SPX1"
FORMAT_VERSION = 1
_EMB_HEADER = struct.Struct("<4sIIQQ")
_SPX_HEADER = struct.Struct("<4sIQQQ")
_SPX_TRIPLET = np.dtype([("col", "<u8"), ("row", "<u8"), ("value", "<f8")])
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class DBKSVDError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(DBKSVDError, ValueError):
    pass


class DimensionMismatch(DBKSVDError, ValueError):
    pass


class ZeroColumn(DBKSVDError, ValueError):
    def __init__(self, index: int):
        super().__init__(f"column {index} has (near-)zero norm")
        self.index = index


class FormatError(DBKSVDError, OSError):
    pass


class BadMagic(FormatError):
    pass


class TruncatedFile(FormatError):
    pass


class UnsupportedDtype(FormatError):
    pass


class NonFiniteState(DBKSVDError, FloatingPointError):
    pass


# --------------------------------------------------------------------------
# normalization


def normalize_columns(matrix: np.ndarray, dtype=None) -> np.ndarray:
    """Return a copy of ``matrix`` with every column scaled to unit norm.

    Raises ZeroColumn for the first column whose norm is below 1e-12.
    """
    a = np.asarray(matrix)
    if a.ndim != 2:
        raise DimensionMismatch(f"expected a 2-D matrix, got shape {a.shape}")
    dtype = np.dtype(dtype or (a.dtype if a.dtype.kind == "f" else np.float64))
    norms = np.sqrt(np.einsum("ij,ij->j", a, a, dtype=np.float64))
    bad = np.flatnonzero(norms < NORM_EPS)
    if bad.size:
        raise ZeroColumn(int(bad[0]))
    return np.asfortranarray(a / norms, dtype=dtype)


def check_dictionary(D: np.ndarray, tol: float = UNIT_NORM_TOL) -> None:
    if D.ndim != 2:
        raise DimensionMismatch(f"dictionary must be 2-D, got shape {D.shape}")
    norms = np.linalg.norm(D.astype(np.float64, copy=False), axis=0)
    bad = np.flatnonzero(np.abs(norms - 1.0) > tol)
    if bad.size:
        raise ValueError(f"dictionary column {bad[0]} has norm {norms[bad[0]]:.8g}")


def fingerprint(D: np.ndarray) -> str:
    """Content hash of a matrix (shape, dtype and bytes)."""
    h = hashlib.blake2b(digest_size=16)
    h.update(repr((D.shape, D.dtype.str)).encode())
    h.update(np.ascontiguousarray(D).tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# sparse codes


@dataclass
class SparseCodeMatrix:
    """Column-sparse m x n coefficient matrix with at most ``k`` entries per column.

    Column entries live in two padded (n, k) arrays: ``atoms`` (atom index,
    -1 marks an empty slot) and ``coefs``.  The row occupancy index (for each
    atom j, the columns using it and the slot holding the entry) is kept in
    CSR form and rebuilt whenever the sparsity pattern changes; value-only
    updates leave it untouched.
    """

    m: int
    atoms: np.ndarray
    coefs: np.ndarray
    row_ptr: np.ndarray = field(init=False, repr=False)
    row_cols: np.ndarray = field(init=False, repr=False)
    row_slots: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.atoms = np.ascontiguousarray(self.atoms, dtype=np.int64)
        self.coefs = np.ascontiguousarray(self.coefs, dtype=np.float64)
        if self.atoms.ndim != 2 or self.atoms.shape != self.coefs.shape:
            raise DimensionMismatch("atoms and coefs must share an (n, k) shape")
        if self.atoms.size and (self.atoms.max() >= self.m or self.atoms.min() < -1):
            raise ValueError("atom index out of range")
        self._reindex()

    # construction -----------------------------------------------------

    @classmethod
    def empty(cls, m: int, n: int, k: int) -> "SparseCodeMatrix":
        return cls(m, np.full((n, k), -1, np.int64), np.zeros((n, k)))

    @classmethod
    def from_dense(cls, X: np.ndarray, k: int | None = None) -> "SparseCodeMatrix":
        X = np.asarray(X, dtype=np.float64)
        m, n = X.shape
        counts = np.count_nonzero(X, axis=0)
        k = int(counts.max(initial=0)) if k is None else k
        if counts.size and counts.max() > k:
            raise ValueError(f"a column holds {counts.max()} nonzeros, more than k={k}")
        out = cls.empty(m, n, max(k, 1))
        rows, cols = np.nonzero(X.T)  # sorted by column, then row
        slots = np.arange(rows.size) - np.searchsorted(rows, rows)
        out.atoms[rows, slots] = cols
        out.coefs[rows, slots] = X.T[rows, cols]
        out._reindex()
        return out

    @classmethod
    def hstack(cls, parts: list["SparseCodeMatrix"], m: int | None = None) -> "SparseCodeMatrix":
        if not parts:
            return cls.empty(m or 0, 0, 1)
        m = parts[0].m if m is None else m
        k = max(p.k for p in parts)
        atoms = [np.pad(p.atoms, ((0, 0), (0, k - p.k)), constant_values=-1) for p in parts]
        coefs = [np.pad(p.coefs, ((0, 0), (0, k - p.k))) for p in parts]
        return cls(m, np.vstack(atoms), np.vstack(coefs))

    @classmethod
    def union(cls, parts: list["SparseCodeMatrix"], offsets: list[int], m: int) -> "SparseCodeMatrix":
        """Merge codes over disjoint atom ranges; part i's atom a becomes offsets[i] + a."""
        atoms = [np.where(p.atoms >= 0, p.atoms + off, -1) for p, off in zip(parts, offsets)]
        return cls(m, np.hstack(atoms), np.hstack([p.coefs for p in parts]))

    def copy(self) -> "SparseCodeMatrix":
        return SparseCodeMatrix(self.m, self.atoms.copy(), self.coefs.copy())

    # shape ------------------------------------------------------------

    @property
    def n(self) -> int:
        return self.atoms.shape[0]

    @property
    def k(self) -> int:
        return self.atoms.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.m, self.n)

    @property
    def nnz(self) -> int:
        return int(self.row_cols.size)

    def column_counts(self) -> np.ndarray:
        return np.count_nonzero(self.atoms >= 0, axis=1)

    # access -----------------------------------------------------------

    def column(self, s: int) -> tuple[np.ndarray, np.ndarray]:
        used = self.atoms[s] >= 0
        return self.atoms[s][used], self.coefs[s][used]

    def row_support(self, j: int) -> np.ndarray:
        return self.row_cols[self.row_ptr[j] : self.row_ptr[j + 1]]

    def row_values(self, j: int) -> np.ndarray:
        lo, hi = self.row_ptr[j], self.row_ptr[j + 1]
        return self.coefs[self.row_cols[lo:hi], self.row_slots[lo:hi]]

    def row_counts(self) -> np.ndarray:
        return np.diff(self.row_ptr)

    def set_row_values(self, j: int, values: np.ndarray) -> None:
        lo, hi = self.row_ptr[j], self.row_ptr[j + 1]
        if len(values) != hi - lo:
            raise DimensionMismatch(f"row {j} has {hi - lo} entries, got {len(values)} values")
        self.coefs[self.row_cols[lo:hi], self.row_slots[lo:hi]] = values

    def insert(self, s: int, j: int, value: float) -> None:
        """Add ``value`` at (j, s), summing into an existing entry."""
        if not 0 <= j < self.m:
            raise IndexError(f"atom {j} out of range")
        hit = np.flatnonzero(self.atoms[s] == j)
        if hit.size:
            self.coefs[s, hit[0]] += value
            return
        free = np.flatnonzero(self.atoms[s] < 0)
        if not free.size:
            raise ValueError(f"column {s} already holds k={self.k} entries")
        self.atoms[s, free[0]] = j
        self.coefs[s, free[0]] = value
        self._reindex()

    def to_dense(self) -> np.ndarray:
        X = np.zeros((self.m, self.n))
        rows, slots = np.nonzero(self.atoms >= 0)
        np.add.at(X, (self.atoms[rows, slots], rows), self.coefs[rows, slots])
        return X

    def reconstruct(self, D: np.ndarray, cols: np.ndarray | None = None) -> np.ndarray:
        """D @ X restricted to ``cols`` (all columns by default), without densifying X."""
        atoms = self.atoms if cols is None else self.atoms[cols]
        coefs = self.coefs if cols is None else self.coefs[cols]
        out = np.zeros((D.shape[0], atoms.shape[0]), dtype=np.result_type(D.dtype, np.float32))
        for slot in range(atoms.shape[1]):
            a = atoms[:, slot]
            live = a >= 0
            if live.all():
                out += D[:, a] * coefs[:, slot].astype(out.dtype)
            elif live.any():
                out[:, live] += D[:, a[live]] * coefs[live, slot].astype(out.dtype)
        return out

    def triplets(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(col, row, value) triplets sorted by column then row."""
        cols, slots = np.nonzero(self.atoms >= 0)
        rows = self.atoms[cols, slots]
        order = np.lexsort((rows, cols))
        return cols[order], rows[order], self.coefs[cols, slots][order]

    def audit(self) -> None:
        """Walk both views and check they describe the same entries."""
        for s in range(self.n):
            live = self.atoms[s][self.atoms[s] >= 0]
            if len(np.unique(live)) != len(live):
                raise AssertionError(f"column {s} repeats an atom")
        seen = set()
        for j in range(self.m):
            lo, hi = self.row_ptr[j], self.row_ptr[j + 1]
            for c, slot in zip(self.row_cols[lo:hi], self.row_slots[lo:hi]):
                if self.atoms[c, slot] != j:
                    raise AssertionError(f"row index entry ({j}, {c}) is stale")
                seen.add((int(c), int(slot)))
        expected = {(int(c), int(s)) for c, s in zip(*np.nonzero(self.atoms >= 0))}
        if seen != expected:
            raise AssertionError("row index and column lists disagree")

    def _reindex(self) -> None:
        cols, slots = np.nonzero(self.atoms >= 0)
        rows = self.atoms[cols, slots]
        order = np.lexsort((cols, rows))
        self.row_cols = cols[order]
        self.row_slots = slots[order]
        self.row_ptr = np.zeros(self.m + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=self.m), out=self.row_ptr[1:])


def as_dense_codes(X) -> np.ndarray:
    return X.to_dense() if isinstance(X, SparseCodeMatrix) else np.asarray(X, dtype=np.float64)


# --------------------------------------------------------------------------
# EMB1 / SPX1 files


def _dtype_code(dtype: np.dtype) -> int:
    for code, dt in _DTYPE_CODES.items():
        if np.dtype(dtype).newbyteorder("<") == dt:
            return code
    raise UnsupportedDtype(f"cannot store dtype {dtype}; use float32 or float64")


def store_matrix(path, matrix: np.ndarray) -> None:
    a = np.asarray(matrix)
    if a.ndim != 2:
        raise DimensionMismatch(f"expected a 2-D matrix, got shape {a.shape}")
    code = _dtype_code(a.dtype)
    rows, cols = a.shape
    with open(path, "wb") as fh:
        fh.write(_EMB_HEADER.pack(EMB_MAGIC, FORMAT_VERSION, code, rows, cols))
        fh.write(np.asarray(a, dtype=_DTYPE_CODES[code]).tobytes(order="F"))


def read_matrix_header(fh) -> tuple[np.dtype, int, int]:
    raw = fh.read(_EMB_HEADER.size)
    if len(raw) < 4 or raw[:4] != EMB_MAGIC:
        raise BadMagic(f"not an EMB1 file (magic {raw[:4]!r})")
    if len(raw) < _EMB_HEADER.size:
        raise TruncatedFile("EMB1 header is incomplete")
    _, version, code, rows, cols = _EMB_HEADER.unpack(raw)
    if version != FORMAT_VERSION:
        raise UnsupportedDtype(f"unsupported EMB1 version {version}")
    if code not in _DTYPE_CODES:
        raise UnsupportedDtype(f"unknown dtype code {code}")
    return _DTYPE_CODES[code], rows, cols


def load_matrix(path, dtype=None, col_start: int = 0, col_stop: int | None = None) -> np.ndarray:
    """Load an EMB1 file (optionally a window of columns) as a Fortran-ordered array."""
    with open(path, "rb") as fh:
        file_dtype, rows, cols = read_matrix_header(fh)
        col_stop = cols if col_stop is None else min(col_stop, cols)
        if not 0 <= col_start <= col_stop:
            raise ValueError(f"bad column window [{col_start}, {col_stop})")
        fh.seek(_EMB_HEADER.size + col_start * rows * file_dtype.itemsize)
        want = (col_stop - col_start) * rows
        buf = fh.read(want * file_dtype.itemsize)
        if len(buf) != want * file_dtype.itemsize:
            raise TruncatedFile(f"{path}: expected {want} values, found {len(buf) // file_dtype.itemsize}")
        if col_stop == cols and fh.read(1):
            raise FormatError(f"{path}: trailing bytes after matrix payload")
    out = np.frombuffer(buf, dtype=file_dtype).reshape((rows, col_stop - col_start), order="F")
    return np.array(out, dtype=dtype or file_dtype.newbyteorder("="), order="F")


def matrix_shape(path) -> tuple[int, int]:
    with open(path, "rb") as fh:
        _, rows, cols = read_matrix_header(fh)
    return rows, cols


def store_codes(path, X: SparseCodeMatrix) -> None:
    cols, rows, values = X.triplets()
    rec = np.empty(cols.size, dtype=_SPX_TRIPLET)
    rec["col"], rec["row"], rec["value"] = cols, rows, values
    with open(path, "wb") as fh:
        fh.write(_SPX_HEADER.pack(SPX_MAGIC, FORMAT_VERSION, X.m, X.n, cols.size))
        fh.write(rec.tobytes())


def load_codes(path, k: int | None = None) -> SparseCodeMatrix:
    with open(path, "rb") as fh:
        raw = fh.read(_SPX_HEADER.size)
        if len(raw) < 4 or raw[:4] != SPX_MAGIC:
            raise BadMagic(f"not an SPX1 file (magic {raw[:4]!r})")
        if len(raw) < _SPX_HEADER.size:
            raise TruncatedFile("SPX1 header is incomplete")
        _, version, m, n, nnz = _SPX_HEADER.unpack(raw)
        if version != FORMAT_VERSION:
            raise UnsupportedDtype(f"unsupported SPX1 version {version}")
        buf = fh.read(nnz * _SPX_TRIPLET.itemsize)
    if len(buf) != nnz * _SPX_TRIPLET.itemsize:
        raise TruncatedFile(f"{path}: expected {nnz} triplets")
    rec = np.frombuffer(buf, dtype=_SPX_TRIPLET)
    cols = rec["col"].astype(np.int64)
    if nnz and (np.any(np.diff(cols) < 0) or cols[-1] >= n or rec["row"].max() >= m):
        raise FormatError(f"{path}: triplets out of range or not sorted by column")
    counts = np.bincount(cols, minlength=n)
    width = max(int(counts.max(initial=0)), k or 0, 1)
    out = SparseCodeMatrix.empty(m, n, width)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1])) if n else np.zeros(0, np.int64)
    slots = np.arange(nnz) - starts[cols]
    out.atoms[cols, slots] = rec["row"].astype(np.int64)
    out.coefs[cols, slots] = rec["value"]
    out._reindex()
    return out


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(Path(path), "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# --------------------------------------------------------------------------
# run configuration


@dataclass
class TrainingConfig:
    atoms: int
    sparsity: int
    batch_size: int = 65536
    iterations: int = 40
    workers: int = 1
    seed: int = 0
    groups: list[int] = field(default_factory=list)
    precision: str = "f32"
    mp_tol: float = 1e-7
    mp_max_steps: int | None = None
    lanczos_tol: float = 1e-6
    lanczos_max_iters: int | None = None
    early_stop: bool = False
    early_stop_tol: float = 1e-4
    early_stop_window: int = 5
    deterministic: bool = True

    def __post_init__(self):
        self.groups = [int(g) for g in self.groups]
        self.validate()

    def validate(self) -> None:
        if self.atoms < 1:
            raise ConfigError("atoms must be >= 1")
        if not 1 <= self.sparsity <= self.atoms:
            raise ConfigError(f"sparsity must satisfy 1 <= k <= m, got k={self.sparsity}, m={self.atoms}")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.groups:
            if sum(self.groups) != self.atoms:
                raise ConfigError(f"group sizes sum to {sum(self.groups)}, expected {self.atoms}")
            if any(b < a for a, b in zip(self.groups, self.groups[1:])):
                raise ConfigError("group sizes must be nondecreasing")
            if any(g < 1 for g in self.groups):
                raise ConfigError("group sizes must be positive")

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32 if self.precision == "f32" else np.float64)
