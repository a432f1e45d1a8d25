"""Dense linear algebra and statistics shared by the analyses.

Everything here works in float64 regardless of the input dtype.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import linalg, stats

from .errors import (
    DegenerateInputError,
    DegenerateStatisticError,
    IllConditionedError,
)

# Relative shrinkage applied to every covariance estimate: lambda = REG_SCALE * tr(S) / d.
REG_SCALE = 1e-4
# Absolute floor so a zero-covariance estimate stays invertible.
REG_FLOOR = 1e-10


def as_vector(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise DegenerateInputError(f"expected a vector, got shape {v.shape}")
    return v


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def layer_norm(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * weight + bias


def cosine(a, b) -> float:
    """Cosine similarity, clipped into [-1, 1]."""
    a, b = as_vector(a), as_vector(b)
    if a.shape != b.shape:
        raise DegenerateInputError(f"dimension mismatch {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine of a zero-norm vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def pearson(x, y) -> float:
    x, y = as_vector(x), as_vector(y)
    if x.shape != y.shape:
        raise DegenerateInputError(f"length mismatch {x.shape} vs {y.shape}")
    if len(x) < 2:
        raise DegenerateStatisticError("pearson needs at least two points", side="both")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = dx @ dx, dy @ dy
    if sxx == 0.0 and syy == 0.0:
        raise DegenerateStatisticError("both inputs are constant", side="both")
    if sxx == 0.0:
        raise DegenerateStatisticError("x is constant", side="x")
    if syy == 0.0:
        raise DegenerateStatisticError("y is constant", side="y")
    # one square root of the product keeps perfectly (anti)correlated inputs at exactly +/-1
    return float(np.clip(dx @ dy / np.sqrt(sxx * syy), -1.0, 1.0))


def average_ranks(x) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    return stats.rankdata(as_vector(x), method="average")


def spearman(x, y) -> tuple[float, float]:
    """Spearman rho and a two-sided p-value.

    The p-value uses the t approximation t = rho * sqrt((n-2)/(1-rho^2)) with
    n-2 degrees of freedom; |rho| = 1 gives p = 0.
    """
    x, y = as_vector(x), as_vector(y)
    if x.shape != y.shape:
        raise DegenerateInputError(f"length mismatch {x.shape} vs {y.shape}")
    n = len(x)
    if n < 4:
        raise DegenerateInputError(f"spearman needs at least 4 points, got {n}")
    try:
        rho = pearson(average_ranks(x), average_ranks(y))
    except DegenerateStatisticError as exc:
        raise DegenerateStatisticError(f"all-tied input: {exc}", side=exc.side) from None
    if abs(rho) >= 1.0:
        return rho, 0.0
    t = rho * np.sqrt((n - 2) / (1.0 - rho * rho))
    p = 2.0 * stats.t.sf(abs(t), df=n - 2)
    return rho, float(p)


def regression_slope(alphas, deltas) -> float:
    """Ordinary least-squares slope of ``deltas`` on ``alphas``."""
    a, d = as_vector(alphas), as_vector(deltas)
    if a.shape != d.shape or len(a) < 2:
        raise DegenerateInputError("regression needs two equal-length vectors of length >= 2")
    da = a - a.mean()
    sxx = da @ da
    if sxx == 0.0:
        raise DegenerateInputError("alphas are all equal; slope undefined")
    return float(da @ (d - d.mean()) / sxx)


@dataclass(frozen=True)
class GaussianEstimate:
    mean: np.ndarray
    covariance: np.ndarray
    regularisation: float
    sample_count: int

    @property
    def dim(self) -> int:
        return len(self.mean)

    def regularised(self) -> np.ndarray:
        return self.covariance + self.regularisation * np.eye(self.dim)


def default_regularisation(covariance: np.ndarray) -> float:
    d = covariance.shape[0]
    return max(REG_SCALE * float(np.trace(covariance)) / d, REG_FLOOR)


def fit_gaussian(samples, regularisation: float | None = None) -> GaussianEstimate:
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise DegenerateInputError("need a (n >= 2, d) sample matrix")
    mean = X.mean(axis=0)
    cov = np.cov(X, rowvar=False, ddof=1).reshape(X.shape[1], X.shape[1])
    cov = 0.5 * (cov + cov.T)
    lam = default_regularisation(cov) if regularisation is None else float(regularisation)
    return GaussianEstimate(mean=mean, covariance=cov, regularisation=lam, sample_count=X.shape[0])


def _cholesky(g: GaussianEstimate):
    try:
        return linalg.cho_factor(g.regularised(), lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise IllConditionedError(f"covariance not positive definite after regularisation: {exc}") from None


def mahalanobis(a, g: GaussianEstimate) -> float:
    a = as_vector(a)
    if a.shape != g.mean.shape:
        raise DegenerateInputError(f"dimension mismatch {a.shape} vs {g.mean.shape}")
    diff = a - g.mean
    sol = linalg.cho_solve(_cholesky(g), diff)
    return float(np.sqrt(max(diff @ sol, 0.0)))


def mahalanobis_many(A, g: GaussianEstimate) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    diff = A - g.mean
    sol = linalg.cho_solve(_cholesky(g), diff.T).T
    return np.sqrt(np.maximum(np.einsum("ij,ij->i", diff, sol), 0.0))


def topk_indices(v, k: int) -> list[int]:
    """Indices of the k largest entries, descending; ties go to the lower index."""
    v = as_vector(v)
    if not 1 <= k <= len(v):
        raise ValueError(f"k must be in [1, {len(v)}], got {k}")
    order = np.argsort(-v, kind="stable")
    return [int(i) for i in order[:k]]


def union_find_clusters(n: int, edges: Iterable[Sequence[int]]) -> list[set[int]]:
    """Connected components of an undirected graph on 0..n-1, singletons included.

    Components are ordered by their smallest member.
    """
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a, b in edges:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    groups: dict[int, set[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), set()).add(i)
    return [groups[r] for r in sorted(groups)]
