"""Matryoshka-structured iterations: atom groups fit to successive residuals."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .core import DBKSVDError, SparseCodeMatrix
from .encoder import build_gram_cache, encode_batch
from .updater import inner_batched_update

DEFAULT_GROUPS = {
    4096: [256, 256, 512, 1024, 2048],
    16384: [256, 256, 512, 1024, 2048, 4096, 8192],
}


class BadPartition(DBKSVDError, ValueError):
    pass


@dataclass(frozen=True)
class GroupLayout:
    sizes: tuple[int, ...]
    budgets: tuple[int, ...]

    @property
    def m(self) -> int:
        return sum(self.sizes)

    @property
    def k(self) -> int:
        return sum(self.budgets)

    @property
    def ranges(self) -> list[tuple[int, int]]:
        edges = np.concatenate(([0], np.cumsum(self.sizes)))
        return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]


def make_layout(m: int, k: int, group_sizes) -> GroupLayout:
    """Split the sparsity budget equally over groups, remainder to the last groups."""
    sizes = tuple(int(g) for g in group_sizes)
    if not sizes or sum(sizes) != m or min(sizes) < 1:
        raise BadPartition(f"group sizes {list(sizes)} do not partition m={m}")
    G = len(sizes)
    if G > k:
        raise BadPartition(f"{G} groups cannot share a budget of k={k}")
    base, extra = divmod(k, G)
    budgets = tuple(base + (1 if i >= G - extra else 0) for i in range(G))
    return GroupLayout(sizes, budgets)


def matryoshka_iteration(
    Y: np.ndarray,
    D: np.ndarray,
    layout: GroupLayout,
    workers: int = 1,
    rng: np.random.Generator | None = None,
    max_steps: int | None = None,
    lanczos_tol: float = 1e-6,
    lanczos_max_iters: int | None = None,
    timings: dict | None = None,
) -> tuple[np.ndarray, SparseCodeMatrix]:
    """Encode and update each group in turn against the residual left by earlier groups.

    Returns the updated dictionary and the union of the per-group codes.
    """
    if D.shape[1] != layout.m:
        raise BadPartition(f"layout covers {layout.m} atoms, dictionary has {D.shape[1]}")
    D = np.array(D, order="F")
    R = np.array(Y, dtype=D.dtype, order="F")
    parts = []
    for (lo, hi), k_i in zip(layout.ranges, layout.budgets):
        Dg = D[:, lo:hi]
        t0 = time.perf_counter()
        codes = encode_batch(build_gram_cache(Dg, R), k_i, workers=workers, max_steps=max_steps)
        if timings is not None:
            timings["encode"] = timings.get("encode", 0.0) + time.perf_counter() - t0
        Dg, codes = inner_batched_update(
            Dg, codes, R, workers=min(workers, hi - lo), rng=rng,
            tol=lanczos_tol, max_iters=lanczos_max_iters, timings=timings,
        )
        D[:, lo:hi] = Dg
        R -= codes.reconstruct(Dg).astype(R.dtype)
        parts.append(codes)
    return D, SparseCodeMatrix.union(parts, [lo for lo, _ in layout.ranges], layout.m)


def matryoshka_encode(Y: np.ndarray, D: np.ndarray, layout: GroupLayout, workers: int = 1, max_steps: int | None = None) -> SparseCodeMatrix:
    """Training-style encoding: each group encodes the residual of the previous ones."""
    R = np.array(Y, dtype=D.dtype, order="F")
    parts = []
    for (lo, hi), k_i in zip(layout.ranges, layout.budgets):
        Dg = np.asfortranarray(D[:, lo:hi])
        codes = encode_batch(build_gram_cache(Dg, R), k_i, workers=workers, max_steps=max_steps)
        R -= codes.reconstruct(Dg).astype(R.dtype)
        parts.append(codes)
    return SparseCodeMatrix.union(parts, [lo for lo, _ in layout.ranges], layout.m)
