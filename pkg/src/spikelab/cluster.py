"""Clustering baselines and overlap metrics."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.hierarchy import cut_tree, linkage as scipy_linkage
from scipy.special import logsumexp

from .model import gram_reduce
from .numerics import ContractViolation, NumericalFailure, as_stream, best_permutation, sym_eig


# ---------------------------------------------------------------------------
# Overlap
# ---------------------------------------------------------------------------

@dataclass
class OverlapReport:
    """Best-permutation agreement and co-membership agreement of two labelings.

    ``confusion[s, r]`` is the fraction of points with true label ``s`` and
    estimated label ``r``; ``permutation[s]`` is the estimated label matched
    to true label ``s``.
    """

    overlap: float
    pair_overlap: float
    confusion: np.ndarray
    permutation: np.ndarray

    def to_dict(self) -> dict:
        return {"overlap": self.overlap, "pair_overlap": self.pair_overlap,
                "confusion": self.confusion.tolist(), "permutation": self.permutation.tolist()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _encode(labels_hat, labels, k: int | None):
    a = np.asarray(labels_hat).ravel()
    b = np.asarray(labels).ravel()
    if a.size != b.size:
        raise ContractViolation(f"label vectors differ in length: {a.size} vs {b.size}")
    if a.size == 0:
        raise ContractViolation("empty labelings")
    alphabet = np.union1d(a, b)
    k = max(alphabet.size, k or 0)
    return np.searchsorted(alphabet, a), np.searchsorted(alphabet, b), k


def confusion_matrix(labels_hat, labels, k: int | None = None) -> np.ndarray:
    est, truth, k = _encode(labels_hat, labels, k)
    C = np.zeros((k, k))
    np.add.at(C, (truth, est), 1.0)
    return C / truth.size


def overlap(labels_hat, labels, k: int | None = None) -> OverlapReport:
    """Best-permutation overlap and pairwise co-membership agreement.

    ``pair_overlap`` is ``(1/n^2) sum_{i,j} 1{[hat_i = hat_j] == [l_i = l_j]}``
    over all ordered pairs, self-pairs included, so identical labelings
    score exactly 1. It is computed from the contingency counts.
    """
    C = confusion_matrix(labels_hat, labels, k)
    perm, score = best_permutation(C)
    same_both = float(np.sum(C * C))
    same_truth = float(np.sum(C.sum(axis=1) ** 2))
    same_est = float(np.sum(C.sum(axis=0) ** 2))
    pair = 1.0 - same_truth - same_est + 2.0 * same_both
    return OverlapReport(float(score), float(pair), C, perm)


def comembership_agreement(labels_hat, labels, include_self: bool = True) -> float:
    """``(1/n^2) sum_{i,j} 1{hat_i = hat_j and l_i = l_j}`` by direct pair counting.

    With ``include_self`` the diagonal ``i = j`` is counted, in which case the
    value equals ``sum_{s,r} C_{sr}^2`` exactly.
    """
    a = np.asarray(labels_hat).ravel()
    b = np.asarray(labels).ravel()
    n = a.size
    total = 0
    block = max(1, 4_000_000 // max(n, 1))
    for start in range(0, n, block):
        sl = slice(start, start + block)
        total += int(np.count_nonzero((a[sl, None] == a[None, :]) & (b[sl, None] == b[None, :])))
    if not include_self:
        total -= n
    return total / (n * n)


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------

@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    inertia: float
    inertia_trace: list = field(default_factory=list)
    n_iter: int = 0
    reseeded: int = 0


def _sq_dists(X: np.ndarray, C: np.ndarray, x2: np.ndarray) -> np.ndarray:
    d = x2[:, None] - 2.0 * X @ C.T + (C * C).sum(axis=1)[None, :]
    return np.maximum(d, 0.0)


def _kmeanspp(X: np.ndarray, k: int, gen: np.random.Generator, x2: np.ndarray) -> np.ndarray:
    n = X.shape[0]
    centers = [X[gen.integers(n)]]
    d2 = _sq_dists(X, centers[0][None, :], x2)[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        idx = int(gen.choice(n, p=d2 / total)) if total > 0 else int(gen.integers(n))
        centers.append(X[idx])
        d2 = np.minimum(d2, _sq_dists(X, X[idx][None, :], x2)[:, 0])
    return np.array(centers)


def _lloyd(X, centers, max_iter, x2):
    k = centers.shape[0]
    labels = None
    trace = []
    reseeded = 0
    it = 0
    for it in range(1, max_iter + 1):
        d2 = _sq_dists(X, centers, x2)
        new = np.argmin(d2, axis=1)
        trace.append(float(d2[np.arange(X.shape[0]), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, X)
        for j in range(k):
            if counts[j] == 0:
                # reseed from the point farthest from its current center
                far = int(np.argmax(d2[np.arange(X.shape[0]), labels]))
                sums[j] = X[far]
                counts[j] = 1
                labels[far] = j
                d2[far] = 0.0
                reseeded += 1
        centers = sums / counts[:, None]
    d2 = _sq_dists(X, centers, x2)
    labels = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(X.shape[0]), labels].sum())
    return labels, centers, inertia, trace, it, reseeded


def kmeans(data, k: int, init: str = "kmeans++", init_centers=None, max_iter: int = 300,
           n_restarts: int = 10, rng=None) -> KMeansResult:
    """Lloyd's algorithm, best of ``n_restarts`` by inertia.

    ``init="given"`` uses ``init_centers`` (one run). Empty clusters are
    re-seeded from the point farthest from its center.
    """
    X = np.asarray(data, dtype=float)
    n = X.shape[0]
    if k < 1 or k > n:
        raise ContractViolation(f"need 1 <= k <= n, got k={k}, n={n}")
    x2 = (X * X).sum(axis=1)
    if init == "given":
        C0 = np.asarray(init_centers, dtype=float)
        if C0.shape != (k, X.shape[1]):
            raise ContractViolation("init_centers must be k x d")
        starts = [C0.copy()]
    elif init == "kmeans++":
        stream = as_stream(rng)
        starts = [_kmeanspp(X, k, stream.generator(i), x2) for i in range(n_restarts)]
    else:
        raise ContractViolation(f"unknown init {init!r}")
    best = None
    for C0 in starts:
        res = KMeansResult(*_lloyd(X, C0, max_iter, x2))
        if best is None or res.inertia < best.inertia:
            best = res
    return best


# ---------------------------------------------------------------------------
# EM for equal-weight spherical mixtures
# ---------------------------------------------------------------------------

@dataclass
class EMResult:
    labels: np.ndarray
    responsibilities: np.ndarray
    means: np.ndarray
    variance: float
    loglik_trace: list
    reseeded: bool = False
    converged: bool = False


def _loglik(X, means, var, x2):
    n, d = X.shape
    k = means.shape[0]
    logp = -0.5 * _sq_dists(X, means, x2) / var - 0.5 * d * math.log(2 * math.pi * var) - math.log(k)
    lse = logsumexp(logp, axis=1)
    return float(lse.sum()), np.exp(logp - lse[:, None])


def em_spherical(data, k: int, max_iter: int = 200, tol: float = 1e-8, rng=None,
                 fit_variance: bool = False) -> EMResult:
    """EM for ``(1/k) sum_j N(mu_j, sigma^2 I)``.

    ``sigma^2 = 1`` unless ``fit_variance``. The log-likelihood is checked to
    be non-decreasing (relative slack 1e-8) at every iteration.
    """
    X = np.asarray(data, dtype=float)
    n, d = X.shape
    if k < 1 or k > n:
        raise ContractViolation(f"need 1 <= k <= n, got k={k}, n={n}")
    x2 = (X * X).sum(axis=1)
    stream = as_stream(rng)
    means = _kmeanspp(X, k, stream.generator(0), x2)
    var = 1.0
    if fit_variance:
        var = max(float(_sq_dists(X, means, x2).min(axis=1).mean() / d), 1e-12)
    ll, resp = _loglik(X, means, var, x2)
    trace = [ll]
    reseeded = False
    converged = False
    for _ in range(max_iter):
        mass = resp.sum(axis=0)
        dead = mass < 1.0 / n ** 2
        if dead.any():
            far = np.argsort(-_sq_dists(X, means, x2).min(axis=1))
            for j, idx in zip(np.nonzero(dead)[0], far):
                resp[:, j] = 0.0
                resp[idx] = 0.0
                resp[idx, j] = 1.0
            mass = resp.sum(axis=0)
            reseeded = True
            trace = []
        means = (resp.T @ X) / mass[:, None]
        if fit_variance:
            var = max(float(np.sum(resp * _sq_dists(X, means, x2)) / (n * d)), 1e-12)
        ll_new, resp = _loglik(X, means, var, x2)
        if trace and ll_new < trace[-1] - 1e-8 * abs(trace[-1]):
            raise NumericalFailure("EM log-likelihood decreased", trace[-1] - ll_new)
        trace.append(ll_new)
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) <= tol * abs(trace[-1]):
            converged = True
            break
    return EMResult(np.argmax(resp, axis=1), resp, means, var, trace, reseeded, converged)


# ---------------------------------------------------------------------------
# Agglomerative and spectral clustering
# ---------------------------------------------------------------------------

AGGLOMERATIVE_MAX_N = 2000


def agglomerative(data, k: int, linkage: str = "ward") -> np.ndarray:
    """Bottom-up merging until ``k`` clusters remain (ward or average linkage)."""
    X = np.asarray(data, dtype=float)
    n = X.shape[0]
    if n > AGGLOMERATIVE_MAX_N:
        raise ContractViolation(f"agglomerative clustering limited to n <= {AGGLOMERATIVE_MAX_N}, got {n}")
    if linkage not in ("ward", "average"):
        raise ContractViolation(f"unknown linkage {linkage!r}")
    if not 1 <= k <= n:
        raise ContractViolation(f"need 1 <= k <= n, got k={k}")
    if n == 1:
        return np.zeros(1, dtype=np.intp)
    Z = scipy_linkage(X, method=linkage)
    return cut_tree(Z, n_clusters=k)[:, 0].astype(np.intp)


def spectral_cluster(data, k: int, rng=None) -> np.ndarray:
    """k-means on the rows of the top-``k`` eigenvectors of the Gram-reduced matrix."""
    X = np.asarray(data, dtype=float)
    n = X.shape[0]
    if k < 1 or k > n:
        raise ContractViolation(f"need 1 <= k <= n, got k={k}")
    _, V = sym_eig(gram_reduce(X), k)
    return kmeans(math.sqrt(n) * V, k, rng=rng).labels


def null_labels(n: int, k: int, rng=None) -> np.ndarray:
    """Uniform random labels (reference for chance-level overlap)."""
    return as_stream(rng).generator(0).integers(0, k, size=n)
