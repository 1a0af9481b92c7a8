"""Coherence diagnostics and the two training proxy metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .core import DBKSVDError, DimensionMismatch, SparseCodeMatrix

HIST_BINS = 100
UNBOUNDED = math.inf


class AllZeroData(DBKSVDError, ValueError):
    pass


class DegenerateRows(DBKSVDError, ValueError):
    pass


@dataclass
class CoherenceReport:
    mutual_coherence: float
    per_atom: np.ndarray
    hist_counts: np.ndarray
    hist_edges: np.ndarray
    welch_bound: float
    recoverability_limit: float

    def rows(self) -> list[tuple[str, float]]:
        c = self.per_atom
        return [
            ("mutual_coherence", self.mutual_coherence),
            ("welch_bound", self.welch_bound),
            ("recoverability_limit", self.recoverability_limit),
            ("per_atom_coherence_median", float(np.median(c))),
            ("per_atom_coherence_mean", float(np.mean(c))),
            ("aligned_atoms_0.99", int(np.count_nonzero(c > 0.99))),
        ]


def per_atom_coherence(D: np.ndarray) -> np.ndarray:
    G = np.abs(np.asarray(D, dtype=np.float64).T @ np.asarray(D, dtype=np.float64))
    np.fill_diagonal(G, -np.inf)
    return G.max(axis=1)


def coherence_report(D: np.ndarray, bins: int = HIST_BINS) -> CoherenceReport:
    d, m = D.shape
    if m < 2:
        raise ValueError("coherence needs at least two atoms")
    c = per_atom_coherence(D)
    # exact 0 is common for orthonormal dictionaries; keep it exact
    c = np.where(np.abs(c) < 1e-15, 0.0, c)
    counts, edges = np.histogram(np.clip(c, 0.0, 1.0), bins=bins, range=(0.0, 1.0))
    mu = min(float(c.max()), 1.0)
    return CoherenceReport(mu, c, counts, edges, welch_bound(d, m), recoverability_limit(mu) if mu > 0 else UNBOUNDED)


def welch_bound(d: int, m: int) -> float:
    if m < 2:
        raise ValueError("the Welch bound needs m >= 2")
    if m <= d:
        return 0.0
    return math.sqrt((m - d) / (d * (m - 1)))


def recoverability_limit(mu: float) -> float:
    """Largest integer k with k < (1 + 1/mu) / 2; UNBOUNDED for mu == 0."""
    if mu == 0:
        return UNBOUNDED
    if not 0 < mu <= 1:
        raise ValueError(f"coherence must lie in (0, 1], got {mu}")
    bound = 0.5 * (1.0 + 1.0 / mu)
    nearest = round(bound)
    if abs(bound - nearest) <= 1e-9 * max(1.0, bound):
        return nearest - 1
    return math.floor(bound)


@numba.njit(cache=True)
def _column_norms(Y, D, atoms, coefs):
    d, n = Y.shape
    rnorm = np.zeros(n)
    ynorm = np.zeros(n)
    r = np.empty(d)
    for s in range(n):
        for i in range(d):
            r[i] = Y[i, s]
        for t in range(atoms.shape[1]):
            a = atoms[s, t]
            if a >= 0:
                c = coefs[s, t]
                for i in range(d):
                    r[i] -= D[i, a] * c
        rr = 0.0
        yy = 0.0
        for i in range(d):
            rr += r[i] * r[i]
            yy += float(Y[i, s]) * Y[i, s]
        rnorm[s] = np.sqrt(rr)
        ynorm[s] = np.sqrt(yy)
    return rnorm, ynorm


@numba.njit(cache=True)
def _row_variances(Y, D, atoms, coefs):
    """Population variances of the rows of Y and of Y - DX, two passes."""
    d, n = Y.shape
    means = np.zeros((2, d))
    out = np.zeros((2, d))
    r = np.empty(d)
    for sweep in range(2):
        for s in range(n):
            for i in range(d):
                r[i] = Y[i, s]
            for t in range(atoms.shape[1]):
                a = atoms[s, t]
                if a >= 0:
                    c = coefs[s, t]
                    for i in range(d):
                        r[i] -= D[i, a] * c
            for i in range(d):
                y = float(Y[i, s])
                if sweep == 0:
                    means[0, i] += y
                    means[1, i] += r[i]
                else:
                    out[0, i] += (y - means[0, i]) ** 2
                    out[1, i] += (r[i] - means[1, i]) ** 2
        if sweep == 0:
            for i in range(d):
                means[0, i] /= n
                means[1, i] /= n
    return out[0] / n, out[1] / n


def _codes(Y, D, X):
    if Y.shape[0] != D.shape[0]:
        raise DimensionMismatch(f"data dim {Y.shape[0]} != dictionary dim {D.shape[0]}")
    if not isinstance(X, SparseCodeMatrix):
        X = SparseCodeMatrix.from_dense(X)
    if X.shape != (D.shape[1], Y.shape[1]):
        raise DimensionMismatch(f"codes of shape {X.shape} do not match D {D.shape} and Y {Y.shape}")
    return np.asarray(Y), np.asarray(D, dtype=np.float64), X.atoms, X.coefs


def mean_relative_error(Y, D, X, return_skipped: bool = False):
    """Mean over samples of ||y - Dx|| / ||y||; near-zero samples are skipped."""
    rnorm, ynorm = _column_norms(*_codes(Y, D, X))
    keep = ~(ynorm < 1e-12)  # NaN stays in and propagates
    if not keep.any():
        raise AllZeroData("every sample has zero norm")
    value = float(np.mean(rnorm[keep] / ynorm[keep]))
    return (value, int(np.count_nonzero(~keep))) if return_skipped else value


def variance_explained(Y, D, X, return_skipped: bool = False):
    """1 - mean over rows of var(residual row) / var(data row), population variances."""
    vy, vr = _row_variances(*_codes(Y, D, X))
    keep = ~(vy <= 1e-12)
    if not keep.any():
        raise DegenerateRows("every data row is constant")
    value = float(1.0 - np.mean(vr[keep] / vy[keep]))
    return (value, int(np.count_nonzero(~keep))) if return_skipped else value
