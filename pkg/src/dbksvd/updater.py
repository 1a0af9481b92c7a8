"""Inner-batched KSVD dictionary update.

Each atom update takes the restricted error matrix E_j (samples using atom
j, with its own contribution added back), forms S = E_j E_j^T and finds the
top eigenpair of S with Lanczos.  Atoms are processed in shuffled batches
of ``workers`` atoms that all read the same snapshot; a batch's updates are
applied together before the next batch starts.
"""

from __future__ import annotations

import logging
import math
import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh_tridiagonal

from .core import NORM_EPS, DBKSVDError, SparseCodeMatrix

log = logging.getLogger(__name__)

LANCZOS_TOL = 1e-6
_START_SEED = 0x5EED


class NoConvergence(DBKSVDError, ArithmeticError):
    def __init__(self, best: "SingularPair", residual: float):
        super().__init__(f"Lanczos stopped at relative residual {residual:.3g}")
        self.best = best
        self.residual = residual


class ZeroMatrix(DBKSVDError, ValueError):
    pass


class ReinitRequested(DBKSVDError):
    def __init__(self, atom: int):
        super().__init__(f"atom {atom} is unused")
        self.atom = atom


@dataclass
class RestrictedError:
    atom: int
    support: np.ndarray
    matrix: np.ndarray | None

    @property
    def unused(self) -> bool:
        return self.support.size == 0


@dataclass
class SingularPair:
    u: np.ndarray
    sigma: float
    v: np.ndarray


@dataclass
class AtomUpdate:
    atom: int
    column: np.ndarray
    support: np.ndarray
    values: np.ndarray


def restricted_error(Y: np.ndarray, D: np.ndarray, X: SparseCodeMatrix, j: int) -> RestrictedError:
    if not 0 <= j < D.shape[1]:
        raise IndexError(f"atom {j} out of range")
    omega = X.row_support(j)
    if omega.size == 0:
        return RestrictedError(j, omega, None)
    E = Y[:, omega] - X.reconstruct(D, omega)
    E += np.outer(D[:, j], X.row_values(j)).astype(E.dtype)
    return RestrictedError(j, omega, np.asfortranarray(E))


def lanczos_top_eigenpair(S: np.ndarray, tol: float = LANCZOS_TOL, max_iters: int | None = None, start=None):
    """Largest eigenpair of a symmetric PSD matrix by restarted Lanczos.

    Full reorthogonalization against the current basis; the basis is
    restarted from the best Ritz vector after 2*ceil(log2 d) + 20 vectors.
    Returns (eigenvalue, unit eigenvector, relative residual, converged).
    """
    S = np.asarray(S, dtype=np.float64)
    d = S.shape[0]
    max_iters = 3 * d if max_iters is None else max_iters
    width = min(d, 2 * math.ceil(math.log2(d)) + 20) if d > 1 else 1
    if start is None:
        q = np.random.default_rng(_START_SEED).standard_normal(d)
    else:
        q = np.array(start, dtype=np.float64)
    nq = np.linalg.norm(q)
    if nq < NORM_EPS:
        q, nq = np.ones(d), math.sqrt(d)
    q /= nq
    used = 0
    while True:
        Q = np.empty((d, width))
        alpha, beta = [], []
        Q[:, 0] = q
        for i in range(width):
            w = S @ Q[:, i]
            used += 1
            a = float(Q[:, i] @ w)
            alpha.append(a)
            basis = Q[:, : i + 1]
            w -= basis @ (basis.T @ w)
            w -= basis @ (basis.T @ w)
            b = float(np.linalg.norm(w))
            if len(alpha) == 1:
                theta, z = np.array([a]), np.ones((1, 1))
            else:
                theta, z = eigh_tridiagonal(np.array(alpha), np.array(beta))
            lam, zt = theta[-1], z[:, -1]
            if (
                b * abs(zt[-1]) <= 0.1 * tol * abs(lam)
                or b <= NORM_EPS * max(abs(lam), 1.0)
                or i + 1 == width
                or used >= max_iters
            ):
                break
            beta.append(b)
            Q[:, i + 1] = w / b
        u = Q[:, : len(alpha)] @ zt
        u /= np.linalg.norm(u)
        Su = S @ u
        lam = float(u @ Su)
        resid = float(np.linalg.norm(Su - lam * u)) / max(abs(lam), np.finfo(float).tiny)
        if resid <= tol:
            return lam, u, resid, True
        if used >= max_iters:
            return lam, u, resid, False
        q = u


def _canonical_sign(u: np.ndarray) -> np.ndarray:
    return -u if u[np.argmax(np.abs(u))] < 0 else u


def top_singular_pair(E, tol: float = LANCZOS_TOL, max_iters: int | None = None, start=None, timings=None) -> SingularPair:
    """Top singular triplet of E via the top eigenpair of E E^T.

    Accepts a RestrictedError or a plain matrix.  Raises ZeroMatrix when
    ||E||_F < 1e-12 and NoConvergence (carrying the best iterate) when
    Lanczos runs out of iterations.
    """
    if isinstance(E, RestrictedError):
        if E.unused:
            raise ValueError(f"atom {E.atom} has an empty support")
        E = E.matrix
    E = np.asarray(E)
    if np.linalg.norm(E) < NORM_EPS:
        raise ZeroMatrix("restricted error matrix is zero")
    t0 = time.perf_counter()
    S = E @ E.T
    t1 = time.perf_counter()
    lam, u, resid, ok = lanczos_top_eigenpair(S, tol, max_iters, start)
    t2 = time.perf_counter()
    u = _canonical_sign(u)
    sigma = math.sqrt(max(lam, 0.0))
    Etu = E.T.astype(np.float64, copy=False) @ u
    v = Etu / sigma if sigma > 0 else Etu
    pair = SingularPair(u, sigma, v)
    if timings is not None:
        timings["form"] += t1 - t0
        timings["eigen"] += t2 - t1
        timings["backsolve"] += time.perf_counter() - t2
    if not ok:
        raise NoConvergence(pair, resid)
    return pair


def _solve_atom(j, omega, E, start, tol, max_iters, timings) -> AtomUpdate | None:
    try:
        pair = top_singular_pair(E, tol, max_iters, start=start, timings=timings)
    except ZeroMatrix:
        return None
    except NoConvergence as exc:
        log.warning("atom %d: %s; accepting best iterate", j, exc)
        pair = exc.best
    return AtomUpdate(j, pair.u, omega, pair.sigma * pair.v)


def _warm_start(d_j: np.ndarray) -> np.ndarray:
    # warm start from the current atom, nudged so the top eigenvector is
    # never exactly orthogonal to the Krylov space
    jitter = np.random.default_rng(_START_SEED).standard_normal(d_j.shape[0])
    return d_j.astype(np.float64) + 1e-2 * jitter / np.linalg.norm(jitter)


def update_atom(D, X: SparseCodeMatrix, Y, j: int, tol: float = LANCZOS_TOL, max_iters: int | None = None) -> AtomUpdate:
    """Compute (without applying) the KSVD update for atom j.

    The new column is the top left singular vector of E_j and the row
    values on the unchanged support are sigma * v.  An all-zero E_j leaves
    the atom as it is.  Raises ReinitRequested for an unused atom.
    """
    err = restricted_error(Y, D, X, j)
    if err.unused:
        raise ReinitRequested(j)
    upd = _solve_atom(j, err.support, err.matrix, _warm_start(D[:, j]), tol, max_iters, None)
    if upd is None:
        return AtomUpdate(j, D[:, j].astype(np.float64), err.support, X.row_values(j).copy())
    return upd


def inner_batched_update(
    D: np.ndarray,
    X: SparseCodeMatrix,
    Y: np.ndarray,
    workers: int = 1,
    rng: np.random.Generator | None = None,
    tol: float = LANCZOS_TOL,
    max_iters: int | None = None,
    timings: dict | None = None,
) -> tuple[np.ndarray, SparseCodeMatrix]:
    """One dictionary sweep with batches of ``workers`` simultaneous atom updates.

    The atom order is a permutation drawn from ``rng`` (identity order when
    ``rng`` is None).  Returns new (D, X); the inputs are not modified and
    the sparsity pattern of X is preserved.  ``timings``, if given, collects
    summed per-phase seconds (gather, form, eigen, backsolve, apply).
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    D = np.array(D, order="F")
    X = X.copy()
    m = D.shape[1]
    order = np.arange(m) if rng is None else rng.permutation(m)
    timings = defaultdict(float) if timings is None else timings
    for key in ("gather", "form", "eigen", "backsolve", "apply"):
        timings.setdefault(key, 0.0)

    # residual of the current state, kept exact under each applied batch
    R = np.asfortranarray(Y - X.reconstruct(D))
    res_norm = np.einsum("ij,ij->j", R, R, dtype=np.float64)
    candidates = iter(np.argsort(-res_norm, kind="stable"))

    def job(j):
        t0 = time.perf_counter()
        omega = X.row_support(j)
        vals = X.row_values(j)
        E = R[:, omega] + np.outer(D[:, j], vals).astype(R.dtype)
        timings["gather"] += time.perf_counter() - t0
        return _solve_atom(j, omega, E, _warm_start(D[:, j]), tol, max_iters, timings)

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for lo in range(0, m, workers):
            batch = order[lo : lo + workers]
            live = [int(j) for j in batch if X.row_ptr[j + 1] > X.row_ptr[j]]
            for j in batch:
                if X.row_ptr[j + 1] == X.row_ptr[j]:
                    _reinit_atom(D, Y, int(j), candidates)
            results = list(pool.map(job, live)) if pool else [job(j) for j in live]
            t0 = time.perf_counter()
            for upd in results:
                if upd is None:
                    continue
                j, omega = upd.atom, upd.support
                old = np.outer(D[:, j], X.row_values(j))
                new = np.outer(upd.column, upd.values)
                R[:, omega] -= (new - old).astype(R.dtype)
                D[:, j] = upd.column
                X.set_row_values(j, upd.values)
            timings["apply"] += time.perf_counter() - t0
    finally:
        if pool:
            pool.shutdown()
    return D, X


def _reinit_atom(D, Y, j, candidates) -> None:
    for i in candidates:
        norm = np.linalg.norm(Y[:, i])
        if norm > NORM_EPS:
            D[:, j] = Y[:, i] / norm
            log.debug("atom %d unused; reinitialized from sample %d", j, i)
            return
