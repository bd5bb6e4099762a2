"""Shared numerical kernels.

Everything here is a pure function of its inputs except :class:`RngStream`,
which is owned by a single trial.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import linalg as sla
from scipy.optimize import linear_sum_assignment


class ContractViolation(ValueError):
    """An input violated a documented precondition."""


class NumericalFailure(RuntimeError):
    """An iterative routine did not converge."""

    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    Backed by the Philox4x64 generator: the 128-bit key holds the seed and the
    stream id, and sub-streams start at disjoint counter offsets (the top
    64-bit counter word holds the sub-stream index). Trials therefore never
    share draws, whatever order they run in.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        if not (0 <= self.seed <= _MASK64 and 0 <= self.stream_id <= _MASK64):
            raise ContractViolation("seed and stream_id must be unsigned 64-bit integers")

    def generator(self, sub: int = 0) -> np.random.Generator:
        """Fresh generator for sub-stream ``sub`` (same arguments -> same draws)."""
        if not 0 <= sub <= _MASK64:
            raise ContractViolation("sub-stream index must be an unsigned 64-bit integer")
        key = (self.stream_id << 64) | self.seed
        bitgen = np.random.Philox(key=key, counter=sub << 192)
        return np.random.Generator(bitgen)

    def child(self, index: int) -> "RngStream":
        """Derived stream for nested work (e.g. per-algorithm randomness in a trial)."""
        return RngStream(self.seed, _splitmix64(_splitmix64(self.stream_id) ^ (index + 1)))

    def record(self) -> dict:
        return {"seed": self.seed, "stream_id": self.stream_id}


def as_stream(rng, default_seed: int = 0) -> RngStream:
    if rng is None:
        return RngStream(default_seed, 0)
    if isinstance(rng, RngStream):
        return rng
    if isinstance(rng, (int, np.integer)):
        return RngStream(int(rng), 0)
    raise TypeError(f"expected RngStream or int seed, got {type(rng).__name__}")


# ---------------------------------------------------------------------------
# Symmetric eigensolver
# ---------------------------------------------------------------------------

def _check_symmetric(M: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ContractViolation(f"expected a square matrix, got shape {M.shape}")
    scale = max(np.abs(M).max(initial=0.0), 1.0)
    if np.abs(M - M.T).max(initial=0.0) > rtol * scale:
        raise ContractViolation("matrix is not symmetric")
    return 0.5 * (M + M.T)


def householder_tridiagonalize(M: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Reduce symmetric ``M`` to tridiagonal form ``Q^T M Q``.

    Returns ``(diag, offdiag, Q)``.
    """
    A = np.array(M, dtype=float)
    n = A.shape[0]
    Q = np.eye(n)
    for k in range(n - 2):
        x = A[k + 1:, k]
        norm_x = np.linalg.norm(x)
        if norm_x == 0.0:
            continue
        alpha = -math.copysign(norm_x, x[0])
        v = x.copy()
        v[0] -= alpha
        vnorm = np.linalg.norm(v)
        if vnorm == 0.0:
            continue
        v /= vnorm
        # H = I - 2 v v^T acting on rows/cols k+1..n-1
        A[k + 1:, k:] -= 2.0 * np.outer(v, v @ A[k + 1:, k:])
        A[k:, k + 1:] -= 2.0 * np.outer(A[k:, k + 1:] @ v, v)
        Q[:, k + 1:] -= 2.0 * np.outer(Q[:, k + 1:] @ v, v)
    return np.diag(A).copy(), np.diag(A, -1).copy(), Q


def tridiagonal_ql(d: np.ndarray, e: np.ndarray, Z: np.ndarray, max_iter: int = 60):
    """Implicit-shift QL on a symmetric tridiagonal matrix.

    ``d`` is the diagonal, ``e`` the sub-diagonal; ``Z`` accumulates the
    rotations (pass the Householder ``Q`` to get eigenvectors of the original
    matrix). Returns ``(eigenvalues, eigenvectors)`` unsorted.
    """
    d = np.array(d, dtype=float)
    n = d.size
    e = np.append(np.array(e, dtype=float), 0.0)
    Z = np.array(Z, dtype=float)
    eps = np.finfo(float).eps
    for l in range(n):
        iters = 0
        while True:
            m = l
            while m < n - 1:
                dd = abs(d[m]) + abs(d[m + 1])
                if abs(e[m]) <= eps * dd:
                    break
                m += 1
            if m == l:
                break
            iters += 1
            if iters > max_iter:
                raise NumericalFailure("QL iteration did not converge", float(abs(e[l])))
            g = (d[l + 1] - d[l]) / (2.0 * e[l])
            r = math.hypot(g, 1.0)
            g = d[m] - d[l] + e[l] / (g + math.copysign(r, g))
            s = c = 1.0
            p = 0.0
            underflow = False
            i = m - 1
            while i >= l:
                f = s * e[i]
                b = c * e[i]
                r = math.hypot(f, g)
                e[i + 1] = r
                if r == 0.0:
                    d[i + 1] -= p
                    e[m] = 0.0
                    underflow = True
                    break
                s = f / r
                c = g / r
                g = d[i + 1] - p
                r = (d[i] - g) * s + 2.0 * c * b
                p = s * r
                d[i + 1] = g + p
                g = c * r - b
                zi = Z[:, i].copy()
                Z[:, i] = c * zi - s * Z[:, i + 1]
                Z[:, i + 1] = s * zi + c * Z[:, i + 1]
                i -= 1
            if underflow:
                continue
            d[l] -= p
            e[l] = g
            e[m] = 0.0
    return d, Z


def _fix_signs(V: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(V), axis=0)
    signs = np.sign(V[idx, np.arange(V.shape[1])])
    signs[signs == 0] = 1.0
    return V * signs


def sym_eig(M, top_k: int, method: str = "lapack") -> tuple[np.ndarray, np.ndarray]:
    """Top-``top_k`` eigenpairs of a symmetric matrix, eigenvalues descending.

    ``method="householder"`` runs the in-house Householder + implicit QL
    solver (O(n^3) Python-level rotations, fine up to a few hundred rows);
    ``"lapack"`` uses LAPACK's ``syevr``. Each eigenvector's largest-magnitude
    entry is made positive.
    """
    M = _check_symmetric(M)
    n = M.shape[0]
    if not 1 <= top_k <= n:
        raise ContractViolation(f"top_k must be in [1, {n}], got {top_k}")
    if method == "householder":
        d, e, Q = householder_tridiagonalize(M)
        vals, vecs = tridiagonal_ql(d, e, Q)
        order = np.argsort(vals)[::-1][:top_k]
        vals, vecs = vals[order], vecs[:, order]
    elif method == "lapack":
        vals, vecs = sla.eigh(M, subset_by_index=(n - top_k, n - 1))
        vals, vecs = vals[::-1], vecs[:, ::-1]
    else:
        raise ContractViolation(f"unknown eigensolver method {method!r}")
    vecs = _fix_signs(vecs)
    scale = max(np.abs(vals).max(initial=0.0), 1.0)
    residual = np.abs(M @ vecs - vecs * vals).max(initial=0.0)
    if residual > 1e-8 * scale:
        raise NumericalFailure("eigenpair residual above tolerance", residual)
    return vals, vecs


# ---------------------------------------------------------------------------
# Quadrature
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuadratureRule:
    """Gauss-Hermite rule for expectations against N(0, 1)."""

    nodes: np.ndarray
    weights: np.ndarray

    @property
    def order(self) -> int:
        return self.nodes.size

    def expect(self, f) -> float:
        """E f(G) for G ~ N(0, 1); ``f`` must accept a node array."""
        return float(np.dot(self.weights, f(self.nodes)))


@lru_cache(maxsize=64)
def gauss_hermite(order: int) -> QuadratureRule:
    """Probabilists' Gauss-Hermite rule with weights summing to one."""
    if not 2 <= order <= 200:
        raise ContractViolation(f"quadrature order must be in [2, 200], got {order}")
    x, w = np.polynomial.hermite_e.hermegauss(order)
    x = 0.5 * (x - x[::-1])
    w = 0.5 * (w + w[::-1])
    w = w / w.sum()
    x.setflags(write=False)
    w.setflags(write=False)
    return QuadratureRule(x, w)


# ---------------------------------------------------------------------------
# PSD projection and assignment
# ---------------------------------------------------------------------------

def project_psd(Q) -> np.ndarray:
    """Frobenius-nearest PSD matrix (clip negative eigenvalues)."""
    Q = _check_symmetric(np.atleast_2d(Q))
    vals, vecs = np.linalg.eigh(Q)
    out = (vecs * np.clip(vals, 0.0, None)) @ vecs.T
    return 0.5 * (out + out.T)


def sqrtm_psd(Q) -> np.ndarray:
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    vals, vecs = np.linalg.eigh(0.5 * (Q + Q.T))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


@lru_cache(maxsize=16)
def _all_permutations(k: int) -> np.ndarray:
    return np.array(list(itertools.permutations(range(k))), dtype=np.intp)


BRUTE_FORCE_MAX_K = 8


def best_permutation(confusion, method: str = "auto") -> tuple[np.ndarray, float]:
    """Permutation ``perm`` maximising ``sum_s C[s, perm[s]]``.

    Exhaustive search for k <= 8, Hungarian assignment above (or when forced
    with ``method="hungarian"``).
    """
    C = np.asarray(confusion, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1] or C.shape[0] < 1:
        raise ContractViolation(f"confusion must be a non-empty square matrix, got {C.shape}")
    if (C < 0).any():
        raise ContractViolation("confusion matrix has negative entries")
    k = C.shape[0]
    if method == "auto":
        method = "brute" if k <= BRUTE_FORCE_MAX_K else "hungarian"
    if method == "brute":
        perms = _all_permutations(k)
        scores = C[np.arange(k), perms].sum(axis=1)
        best = int(np.argmax(scores))
        return perms[best].copy(), float(scores[best])
    if method == "hungarian":
        rows, cols = linear_sum_assignment(C, maximize=True)
        perm = np.empty(k, dtype=np.intp)
        perm[rows] = cols
        return perm, float(C[rows, cols].sum())
    raise ContractViolation(f"unknown method {method!r}")
