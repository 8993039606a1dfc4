"""Dense linear-algebra and assignment kernels.

Arrays are plain ``numpy.ndarray`` in float64; nothing here knows about experts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from .errors import DimensionError, DomainError


@dataclass(frozen=True)
class Assignment:
    perm: np.ndarray  # perm[i] = column assigned to row i
    total_cost: float


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray


@dataclass(frozen=True)
class PcaResult:
    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray

    def transform(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.mean) @ self.components.T


def as_f64(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


def _check_finite(a: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(a)):
        raise DomainError(f"{what} contains non-finite values")


def matmul(a, b) -> np.ndarray:
    a, b = as_f64(a), as_f64(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax(v, axis: int = -1) -> np.ndarray:
    v = as_f64(v)
    if v.size == 0 or v.shape[axis] == 0:
        raise DomainError("softmax of an empty vector")
    z = np.exp(v - v.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def svd(a) -> SvdResult:
    """Thin SVD with a fixed sign convention.

    Each left singular vector is flipped so its first non-negligible entry is
    non-negative; the matching right vector is flipped with it.
    """
    a = as_f64(a)
    if a.ndim != 2:
        raise DimensionError(f"svd expects a matrix, got shape {a.shape}")
    _check_finite(a, "svd input")
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    tol = 1e-12 * max(1.0, float(np.abs(u).max(initial=0.0)))
    for k in range(u.shape[1]):
        nz = np.flatnonzero(np.abs(u[:, k]) > tol)
        if nz.size and u[nz[0], k] < 0:
            u[:, k] = -u[:, k]
            vt[k, :] = -vt[k, :]
    return SvdResult(u=u, s=s, vt=vt)


def pca(points, m: int) -> PcaResult:
    x = as_f64(points)
    if x.ndim != 2:
        raise DimensionError(f"pca expects an n x d matrix, got {x.shape}")
    n, d = x.shape
    if n < 2:
        raise DomainError("pca needs at least two points")
    if not 1 <= m <= min(n, d):
        raise DomainError(f"cannot extract {m} components from {n} x {d} points")
    mean = x.mean(axis=0)
    res = svd(x - mean)
    return PcaResult(
        mean=mean,
        components=res.vt[:m].copy(),
        explained_variance=res.s[:m] ** 2 / (n - 1),
    )


def _hungarian(cost: np.ndarray):
    """Shortest-augmenting-path Hungarian method, O(n^3), minimisation.

    Returns (row -> col, u, v) where u, v are optimal dual potentials, so that
    cost[i, j] - u[i] - v[j] >= 0 with equality on the returned matching.
    """
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j]: row (1-based) owning column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            upd = free & (cur < minv[1:])
            minv[1:][upd] = cur[upd]
            way[1:][upd] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    row_to_col = np.empty(n, dtype=np.int64)
    row_to_col[p[1:] - 1] = np.arange(n)
    return row_to_col, u[1:], v[1:]


def _has_perfect_matching(tight: np.ndarray) -> bool:
    if tight.shape[0] == 0:
        return True
    match = maximum_bipartite_matching(csr_matrix(tight), perm_type="column")
    return bool(np.all(match >= 0))


def _lexicographic_matching(tight: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    n = tight.shape[0]
    if np.all(tight.sum(axis=1) == 1):
        return fallback
    perm = np.empty(n, dtype=np.int64)
    free_cols = np.ones(n, dtype=bool)
    for i in range(n):
        for j in np.flatnonzero(tight[i] & free_cols):
            free_cols[j] = False
            if _has_perfect_matching(tight[i + 1 :][:, free_cols]):
                perm[i] = j
                break
            free_cols[j] = True
        else:  # float noise made the tight graph inconsistent
            return fallback
    return perm


def linear_assignment(cost, maximize: bool = False) -> Assignment:
    """Optimal one-to-one assignment of rows to columns.

    Among all optimal assignments the lexicographically smallest ``perm`` is
    returned, so equal-cost alternatives resolve deterministically.
    """
    c = as_f64(cost)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise DimensionError(f"assignment needs a square matrix, got {c.shape}")
    _check_finite(c, "cost matrix")
    n = c.shape[0]
    if n == 0:
        return Assignment(perm=np.zeros(0, dtype=np.int64), total_cost=0.0)
    work = -c if maximize else c
    perm, u, v = _hungarian(work)
    reduced = work - u[:, None] - v[None, :]
    scale = max(1.0, float(np.abs(work).max()))
    tight = reduced <= 1e-11 * scale * n
    tight[np.arange(n), perm] = True
    perm = _lexicographic_matching(tight, perm)
    return Assignment(perm=perm, total_cost=float(c[np.arange(n), perm].sum()))
