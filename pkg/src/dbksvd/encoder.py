"""Batched matching pursuit over a cached Gram matrix.

With ``G = D^T D`` and ``P = D^T Y`` precomputed, every MP step for a
sample is an argmax over its product column, one lookup and one axpy with
a column of ``G``; no matrix-vector product touches ``D`` again.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numba
import numpy as np

from .core import DimensionMismatch, SparseCodeMatrix, fingerprint

MP_REL_TOL = 1e-7
MIN_CHUNK = 64


class StaleCache(DimensionMismatch):
    pass


@dataclass(frozen=True)
class GramCache:
    gram: np.ndarray  # m x m, D^T D
    correlations: np.ndarray  # m x n, D^T Y
    dictionary_fingerprint: str

    @property
    def m(self) -> int:
        return self.gram.shape[0]

    @property
    def n(self) -> int:
        return self.correlations.shape[1]


def default_max_steps(k: int) -> int:
    # re-selections of already chosen atoms do not count against k, so the
    # step count needs its own cap
    return 4 * k


def build_gram_cache(D: np.ndarray, Y: np.ndarray) -> GramCache:
    if D.ndim != 2 or Y.ndim != 2:
        raise DimensionMismatch("D and Y must be 2-D")
    if D.shape[0] != Y.shape[0]:
        raise DimensionMismatch(f"dictionary dim {D.shape[0]} != data dim {Y.shape[0]}")
    gram = np.asfortranarray(D.T @ D)
    # (Y^T D)^T is already column-major, which avoids a second m x n copy
    corr = np.asfortranarray((Y.T @ D).T)
    return GramCache(gram, corr, fingerprint(D))


@numba.njit(nogil=True, cache=True)
def _mp_columns(gram, corr, k, max_steps, rel_tol, atoms, coefs, products, keep_products, c0, c1):
    m = gram.shape[0]
    p = np.empty(m, dtype=np.float64)
    for s in range(c0, c1):
        init = 0.0
        for i in range(m):
            p[i] = corr[i, s]
            a = abs(p[i])
            if a > init:
                init = a
        n_sel = 0
        steps = 0
        thresh = rel_tol * init
        while init > 0.0 and steps < max_steps:
            j = 0
            best = -1.0
            for i in range(m):
                a = abs(p[i])
                if a > best:
                    best = a
                    j = i
            if best < thresh or best == 0.0:
                break
            slot = -1
            for t in range(n_sel):
                if atoms[s, t] == j:
                    slot = t
                    break
            if slot < 0:
                if n_sel == k:
                    break
                slot = n_sel
                atoms[s, slot] = j
                coefs[s, slot] = 0.0
                n_sel += 1
            c = p[j]
            coefs[s, slot] += c
            for i in range(m):
                p[i] -= c * gram[i, j]
            steps += 1
        if keep_products:
            for i in range(m):
                products[i, s] = p[i]


def _chunks(n: int, workers: int) -> list[tuple[int, int]]:
    parts = max(1, min(workers, n // MIN_CHUNK))
    edges = np.linspace(0, n, parts + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def encode_batch(
    cache: GramCache,
    k: int,
    workers: int = 1,
    max_steps: int | None = None,
    rel_tol: float = MP_REL_TOL,
    dictionary: np.ndarray | None = None,
    return_products: bool = False,
):
    """Matching pursuit for every column of the cached batch.

    Selection is by largest |<r, d_j>| with the lowest index winning ties;
    re-selected atoms accumulate into their existing coefficient.  A sample
    stops when its largest |product| falls below ``rel_tol`` times the
    initial maximum, when a (k+1)-th distinct atom would be added, or after
    ``max_steps`` steps.

    If ``dictionary`` is given it must match the fingerprint the cache was
    built from.  With ``return_products`` the final D^T r columns are
    returned alongside the codes.
    """
    if k < 1 or k > cache.m:
        raise ValueError(f"sparsity must satisfy 1 <= k <= m, got k={k}, m={cache.m}")
    if dictionary is not None and fingerprint(dictionary) != cache.dictionary_fingerprint:
        raise StaleCache("GramCache was built from a different dictionary")
    max_steps = default_max_steps(k) if max_steps is None else max_steps
    n = cache.n
    atoms = np.full((n, k), -1, dtype=np.int64)
    coefs = np.zeros((n, k))
    products = np.zeros((cache.m, n) if return_products else (0, 0), order="F")
    gram = np.asfortranarray(cache.gram)
    corr = np.asfortranarray(cache.correlations)

    def run(span):
        _mp_columns(gram, corr, k, max_steps, rel_tol, atoms, coefs, products, return_products, *span)

    spans = _chunks(n, workers)
    if len(spans) <= 1:
        for span in spans:
            run(span)
    else:
        with ThreadPoolExecutor(max_workers=len(spans)) as pool:
            list(pool.map(run, spans))
    codes = SparseCodeMatrix(cache.m, atoms, coefs)
    return (codes, products) if return_products else codes


def encode_one(D: np.ndarray, y: np.ndarray, k: int, **kw) -> tuple[np.ndarray, np.ndarray]:
    """Encode a single sample; returns (atom indices, coefficients)."""
    if k < 1:
        raise ValueError("sparsity k must be >= 1")
    y = np.asarray(y).reshape(-1, 1)
    codes = encode_batch(build_gram_cache(D, y.astype(D.dtype, copy=False)), k, **kw)
    return codes.column(0)
