"""Slow, direct reference implementations and planted-problem generation.

Nothing here shares kernels with the encoder or updater; these paths exist
so the optimized code has something independent to be checked against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import SparseCodeMatrix, as_dense_codes


@dataclass(frozen=True)
class PlantedSpec:
    d: int
    m: int
    k: int
    n: int
    sigma_x: float = 1.0
    sigma_noise: float = 0.0
    seed: int = 0
    orthonormal: bool = False

    def __post_init__(self):
        if self.sigma_x <= 0 or self.sigma_noise < 0:
            raise ValueError("need sigma_x > 0 and sigma_noise >= 0")
        if not 1 <= self.k <= self.m:
            raise ValueError("need 1 <= k <= m")
        if self.orthonormal and self.m != self.d:
            raise ValueError("an orthonormal planted dictionary needs m == d")

    @property
    def snr(self) -> float:
        return np.inf if self.sigma_noise == 0 else self.sigma_x**2 / self.sigma_noise**2


@dataclass
class PlantedProblem:
    spec: PlantedSpec
    dictionary: np.ndarray
    codes: np.ndarray  # dense m x n
    noise: np.ndarray
    data: np.ndarray

    def empirical_snr(self) -> float:
        nz = self.codes[self.codes != 0]
        return float(np.var(nz) / np.var(self.noise)) if self.noise.any() else np.inf


def generate_planted(spec: PlantedSpec) -> PlantedProblem:
    rng = np.random.default_rng(spec.seed)
    if spec.orthonormal:
        q, r = np.linalg.qr(rng.standard_normal((spec.d, spec.d)))
        D = q * np.sign(np.diag(r))
    else:
        D = rng.standard_normal((spec.d, spec.m))
        D /= np.linalg.norm(D, axis=0)
    support = np.argsort(rng.random((spec.m, spec.n)), axis=0)[: spec.k]
    X = np.zeros((spec.m, spec.n))
    cols = np.broadcast_to(np.arange(spec.n), support.shape)
    X[support, cols] = rng.normal(0.0, spec.sigma_x, size=support.shape)
    noise = rng.normal(0.0, spec.sigma_noise, size=(spec.d, spec.n)) if spec.sigma_noise else np.zeros((spec.d, spec.n))
    Y = D @ X + noise
    return PlantedProblem(spec, np.asfortranarray(D), X, noise, np.asfortranarray(Y))


def naive_mp(D: np.ndarray, y: np.ndarray, k: int, max_steps: int | None = None, rel_tol: float = 1e-7) -> dict[int, float]:
    """Plain matching pursuit, recomputing D^T r from the residual at every step.

    Returns {atom index: coefficient} in order of first selection.
    """
    D = np.asarray(D, dtype=np.float64)
    r = np.asarray(y, dtype=np.float64).copy()
    max_steps = 4 * k if max_steps is None else max_steps
    code: dict[int, float] = {}
    corr = D.T @ r
    init = np.abs(corr).max(initial=0.0)
    if init == 0.0:
        return code
    for _ in range(max_steps):
        corr = D.T @ r
        j = int(np.argmax(np.abs(corr)))
        if abs(corr[j]) < rel_tol * init or corr[j] == 0.0:
            break
        if j not in code and len(code) == k:
            break
        c = float(np.dot(r, D[:, j]))
        code[j] = code.get(j, 0.0) + c
        r = r - c * D[:, j]
    return code


def dense_top_singular_pair(E: np.ndarray) -> tuple[np.ndarray, float, np.ndarray]:
    """Top singular triplet from a full SVD, largest |u| entry made positive."""
    E = np.asarray(E, dtype=np.float64)
    if E.shape[1] > 512:
        raise ValueError("dense SVD oracle is limited to <= 512 columns")
    U, s, Vt = np.linalg.svd(E, full_matrices=False)
    u, v = U[:, 0], Vt[0]
    if u[np.argmax(np.abs(u))] < 0:
        u, v = -u, -v
    return u, float(s[0]), v


def objective(Y: np.ndarray, D: np.ndarray, X) -> float:
    R = np.asarray(Y, dtype=np.float64) - np.asarray(D, dtype=np.float64) @ as_dense_codes(X)
    return float(np.sum(R * R))


def _worst_samples(Y, D, X) -> list[int]:
    R = Y - D @ X
    norms = np.sqrt(np.sum(R * R, axis=0))
    return [int(i) for i in np.argsort(-norms, kind="stable")]


def naive_ksvd_iteration(Y: np.ndarray, D: np.ndarray, X, order=None) -> tuple[np.ndarray, np.ndarray]:
    """One sequential KSVD dictionary sweep with a dense SVD per atom.

    Atoms are visited in ``order`` (index order by default), each seeing all
    earlier updates.  Unused atoms are replaced by the normalized sample with
    the largest residual at the start of the sweep (each sample used once).
    Returns the new dictionary and the dense code matrix.
    """
    Y = np.asarray(Y, dtype=np.float64)
    D = np.array(D, dtype=np.float64)
    X = as_dense_codes(X).copy()
    m = D.shape[1]
    candidates = iter(_worst_samples(Y, D, X))
    for j in range(m) if order is None else order:
        omega = np.flatnonzero(X[j])
        if omega.size == 0:
            for i in candidates:
                norm = np.linalg.norm(Y[:, i])
                if norm > 1e-12:
                    D[:, j] = Y[:, i] / norm
                    break
            continue
        others = [i for i in range(m) if i != j]
        E = Y[:, omega] - D[:, others] @ X[np.ix_(others, omega)]
        if np.linalg.norm(E) < 1e-12:
            continue
        u, s, v = dense_top_singular_pair(E)
        D[:, j] = u
        X[j, omega] = s * v
    return D, X


def recovery_score(D_learned: np.ndarray, D_true: np.ndarray, threshold: float = 0.99) -> float:
    """Fraction of true atoms matched one-to-one (greedily, by |inner product|) above threshold."""
    if D_learned.shape[0] != D_true.shape[0]:
        raise ValueError("dictionaries must share the embedding dimension")
    sim = np.abs(np.asarray(D_learned, dtype=np.float64).T @ np.asarray(D_true, dtype=np.float64))
    order = np.argsort(-sim, axis=None, kind="stable")
    used_l, used_t = set(), set()
    hits = 0
    for flat in order:
        i, j = divmod(int(flat), sim.shape[1])
        if i in used_l or j in used_t:
            continue
        if sim[i, j] <= threshold:
            break
        used_l.add(i)
        used_t.add(j)
        hits += 1
    return hits / D_true.shape[1]


def codes_from_dict(code: dict[int, float], m: int) -> np.ndarray:
    x = np.zeros(m)
    for j, c in code.items():
        x[j] = c
    return x


def sparse_from_planted(problem: PlantedProblem) -> SparseCodeMatrix:
    return SparseCodeMatrix.from_dense(problem.codes, problem.spec.k)
