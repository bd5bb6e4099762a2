"""Strong-signal estimation: spectral factor estimate, subspace loss,
alignment to the prior, Gram-matrix estimate and posterior-mean denoising of
the column factor."""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy import optimize
from scipy.spatial.transform import Rotation

from .model import STRONG, Prior, SpikedSample
from .numerics import ContractViolation, as_stream, sqrtm_psd, sym_eig
from .replica import posterior_mean, scalar_mmse


@dataclass
class FactorEstimate:
    """Row-factor estimate normalised so that ``Lambda_hat^T Lambda_hat / n = I``.

    ``rotation`` is the orthogonal matrix applied by :func:`align_factor`
    (identity when unaligned). ``scale`` is ``Q_Lambda^{1/2}``; multiplying
    by it on the right gives an estimate on the prior's scale.
    """

    Lambda_hat: np.ndarray
    aligned: bool = False
    rotation: np.ndarray | None = None
    eigenvalues: np.ndarray | None = None
    scale: np.ndarray | None = None
    identifiable: bool = True

    def __post_init__(self):
        r = self.Lambda_hat.shape[1]
        if self.rotation is None:
            self.rotation = np.eye(r)
        if self.scale is None:
            self.scale = np.eye(r)

    @property
    def n(self) -> int:
        return self.Lambda_hat.shape[0]

    @property
    def r(self) -> int:
        return self.Lambda_hat.shape[1]

    @property
    def aligned_lambda(self) -> np.ndarray:
        return self.Lambda_hat @ self.scale


@dataclass
class ThetaEstimate:
    Theta_hat: np.ndarray
    risk_estimate: float = float("nan")


def _as_matrix(x) -> np.ndarray:
    if isinstance(x, FactorEstimate):
        return x.Lambda_hat
    x = np.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


# ---------------------------------------------------------------------------
# Spectral estimate and loss
# ---------------------------------------------------------------------------

def spectral_lambda(sample: SpikedSample, r: int | None = None, method: str = "lapack") -> FactorEstimate:
    """Top-``r`` eigenvectors of ``A A^T`` scaled by ``sqrt(n)``."""
    if sample.regime != STRONG:
        warnings.warn(f"spectral_lambda is designed for the strong regime, got {sample.regime!r}",
                      stacklevel=2)
    r = sample.r if r is None else r
    n = sample.n
    if not 1 <= r <= n:
        raise ContractViolation(f"need 1 <= r <= n, got r={r}")
    vals, vecs = sym_eig(sample.A @ sample.A.T, r, method=method)
    return FactorEstimate(math.sqrt(n) * vecs, eigenvalues=vals)


def _orthonormal_basis(X: np.ndarray, name: str) -> np.ndarray:
    U, sv, _ = np.linalg.svd(X, full_matrices=False)
    if sv.size == 0 or sv[-1] <= 1e-10 * max(sv[0], 1e-300):
        raise ContractViolation(f"{name} does not have full column rank")
    return U


def sin_theta_loss(est, truth) -> float:
    """``||P (I - P_hat)||_op`` for the projections onto the two column spans."""
    U = _orthonormal_basis(_as_matrix(truth), "truth")
    V = _orthonormal_basis(_as_matrix(est), "estimate")
    M = U.T - (U.T @ V) @ V.T
    return float(min(np.linalg.norm(M, 2), 1.0))


# ---------------------------------------------------------------------------
# Alignment to the prior
# ---------------------------------------------------------------------------

def prior_symmetries(prior: Prior, tol: float = 1e-12) -> list[np.ndarray]:
    """Non-identity signed permutations that leave a discrete prior invariant.

    Only signed permutation matrices are examined; a Gaussian prior is
    reported through a single ``-I`` entry (it is invariant under all of O(r)).
    """
    r = prior.dim
    if not prior.is_discrete:
        return [-np.eye(r)]
    pts, w = prior.atoms()
    keep = w > 0
    pts, w = pts[keep], w[keep]
    key = {tuple(np.round(p, 12)): wi for p, wi in zip(pts, w)}
    found = []
    for perm in itertools.permutations(range(r)):
        for signs in itertools.product((1.0, -1.0), repeat=r):
            P = np.eye(r)[list(perm)] * np.array(signs)[:, None]
            if np.array_equal(P, np.eye(r)):
                continue
            mapped = pts @ P.T
            ok = all(abs(key.get(tuple(np.round(m, 12)), -1.0) - wi) <= tol
                     for m, wi in zip(mapped, w))
            if ok:
                found.append(P)
    return found


def _prior_quantiles(prior: Prior, directions: np.ndarray, n: int) -> np.ndarray:
    """Quantile functions of the projected prior at the points ``(i + 1/2)/n``."""
    levels = (np.arange(n) + 0.5) / n
    pts, w = prior.atoms()
    out = np.empty((directions.shape[0], n))
    for j, u in enumerate(directions):
        proj = pts @ u
        order = np.argsort(proj, kind="stable")
        cdf = np.cumsum(w[order])
        idx = np.minimum(np.searchsorted(cdf, levels, side="left"), len(w) - 1)
        out[j] = proj[order][idx]
    return out


def _directions(r: int, count: int) -> np.ndarray:
    if r == 2:
        ang = np.pi * np.arange(count) / count
        return np.column_stack([np.cos(ang), np.sin(ang)])
    gen = np.random.Generator(np.random.Philox(key=0x5EED))
    u = gen.standard_normal((count, r))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def _sliced_w2(X: np.ndarray, targets: np.ndarray, directions: np.ndarray) -> float:
    proj = np.sort(X @ directions.T, axis=0).T
    return float(np.mean((proj - targets) ** 2))


def _rotation_from_params(r: int, theta, reflect: bool) -> np.ndarray:
    if r == 2:
        c, s = math.cos(theta[0]), math.sin(theta[0])
        R = np.array([[c, -s], [s, c]])
    else:
        R = Rotation.from_rotvec(np.asarray(theta, dtype=float)).as_matrix()
    if reflect:
        R = R @ np.diag([1.0] * (r - 1) + [-1.0])
    return R


def _align_sliced(X: np.ndarray, prior: Prior, grid: int, n_directions: int) -> np.ndarray:
    n, r = X.shape
    dirs = _directions(r, n_directions)
    targets = _prior_quantiles(prior, dirs, n)

    def cost(theta, reflect):
        return _sliced_w2(X @ _rotation_from_params(r, theta, reflect), targets, dirs)

    if r == 2:
        starts = [np.array([a]) for a in np.linspace(0.0, 2 * np.pi, grid, endpoint=False)]
    else:
        gen = np.random.Generator(np.random.Philox(key=0xA11C))
        starts = [Rotation.random(random_state=np.random.RandomState(int(gen.integers(2**31)))).as_rotvec()
                  for _ in range(grid)]
    best = (math.inf, None, False)
    for reflect in (False, True):
        scores = [cost(t, reflect) for t in starts]
        for i in np.argsort(scores)[:3]:
            res = optimize.minimize(cost, starts[i], args=(reflect,), method="Nelder-Mead",
                                    options={"xatol": 1e-6, "fatol": 1e-12, "maxiter": 2000})
            if res.fun < best[0]:
                best = (float(res.fun), res.x, reflect)
    return _rotation_from_params(r, best[1], best[2])


def _nearest_atoms(Y: np.ndarray, pts: np.ndarray) -> tuple[np.ndarray, float]:
    d2 = (Y ** 2).sum(1)[:, None] - 2 * Y @ pts.T + (pts ** 2).sum(1)[None, :]
    idx = np.argmin(d2, axis=1)
    return pts[idx], float(np.maximum(d2[np.arange(Y.shape[0]), idx], 0.0).mean())


def _align_procrustes(X: np.ndarray, prior: Prior, max_iter: int = 100, n_starts: int = 24) -> np.ndarray:
    # alternate nearest-atom assignment and orthogonal Procrustes from several starts
    pts, _ = prior.atoms()
    r = X.shape[1]
    gen = np.random.Generator(np.random.Philox(key=0x1C9))
    starts = [np.eye(r)] + [np.linalg.qr(gen.standard_normal((r, r)))[0] for _ in range(n_starts - 1)]
    best_cost, best_R = math.inf, starts[0]
    for R in starts:
        for _ in range(max_iter):
            T, _ = _nearest_atoms(X @ R, pts)
            U, _, Vt = np.linalg.svd(X.T @ T)
            R_new = U @ Vt
            if np.allclose(R_new, R, atol=1e-12):
                break
            R = R_new
        cost = _nearest_atoms(X @ R, pts)[1]
        if cost < best_cost:
            best_cost, best_R = cost, R
    return best_R


def align_factor(est: FactorEstimate, prior_lambda: Prior, grid: int = 72,
                 n_directions: int = 32) -> FactorEstimate:
    """Resolve the O(r) ambiguity of a spectral estimate against the prior.

    r = 1: the sign that matches the prior's third moment (or, failing that,
    its mean); priors with neither are flagged unidentifiable. r = 2, 3: the
    element of O(r) minimising the sliced 2-Wasserstein distance between the
    rescaled rows and the prior (grid of ``grid`` starts, Nelder-Mead refine).
    r > 3: nearest-atom/Procrustes iteration (discrete priors only; weaker
    guarantee). The rows are compared on the prior's scale ``Q^{1/2}``.
    """
    r = est.r
    if prior_lambda.dim != r:
        raise ContractViolation(f"prior dimension {prior_lambda.dim} != estimate rank {r}")
    Q = prior_lambda.second_moment()
    scale = sqrtm_psd(Q)
    X = est.Lambda_hat @ scale
    symmetric = len(prior_symmetries(prior_lambda)) > 0
    if r == 1:
        m3 = float(prior_lambda.third_moment().ravel()[0])
        m1 = float(prior_lambda.mean()[0])
        if abs(m3) > 1e-12:
            sign = 1.0 if np.mean(X[:, 0] ** 3) * m3 >= 0 else -1.0
        elif abs(m1) > 1e-12:
            sign = 1.0 if np.mean(X[:, 0]) * m1 >= 0 else -1.0
        else:
            return replace(est, aligned=False, scale=scale, identifiable=False)
        R = np.array([[sign]])
    elif not prior_lambda.is_discrete:
        return replace(est, aligned=False, scale=scale, identifiable=False)
    elif r <= 3:
        # search over the rotation acting on the prior-scale rows
        R = _align_sliced(X, prior_lambda, grid, n_directions)
    else:
        R = _align_procrustes(X, prior_lambda)
    # X R = Lambda_hat scale R, so the rotation on Lambda_hat is scale R scale^{-1};
    # scale is a multiple of I whenever the search is meaningful, but keep it exact
    R_hat = scale @ R @ np.linalg.pinv(scale) if not np.allclose(scale, scale[0, 0] * np.eye(r)) else R
    U, _, Vt = np.linalg.svd(R_hat)
    R_hat = U @ Vt
    return replace(est, Lambda_hat=est.Lambda_hat @ R_hat, aligned=True,
                   rotation=est.rotation @ R_hat, scale=scale, identifiable=not symmetric)


def align_to_truth(est: FactorEstimate, truth: np.ndarray, prior_lambda: Prior | None = None) -> FactorEstimate:
    """Oracle alignment: the orthogonal Procrustes rotation onto the planted factor.

    For experiments that need the planted orientation (e.g. risk curves for
    sign-symmetric priors); not an estimator.
    """
    truth = _as_matrix(truth)
    scale = est.scale if prior_lambda is None else sqrtm_psd(prior_lambda.second_moment())
    U, _, Vt = np.linalg.svd(est.Lambda_hat.T @ truth)
    R = U @ Vt
    return replace(est, Lambda_hat=est.Lambda_hat @ R, aligned=True,
                   rotation=est.rotation @ R, scale=scale)


# ---------------------------------------------------------------------------
# Gram estimate and column-factor denoising
# ---------------------------------------------------------------------------

def _theta_variance(prior_theta) -> float:
    q = prior_theta.scalar_variance() if isinstance(prior_theta, Prior) else float(prior_theta)
    if q == 0.0:
        raise ContractViolation("q_theta must be nonzero")
    return q


def lambda_gram_estimate(est: FactorEstimate, sample: SpikedSample, prior_theta,
                         noise_variance: float = 1.0) -> np.ndarray:
    """Estimate of ``Lambda Lambda^T`` from the top eigenpairs of ``A A^T/d - sigma^2 I``.

    ``prior_theta`` is the column prior or its variance ``q_theta``;
    ``noise_variance`` is the noise entry variance (set 0 for noise-free data).
    """
    q = _theta_variance(prior_theta)
    n, d = sample.A.shape
    M = sample.A @ sample.A.T / d
    M[np.diag_indices(n)] -= noise_variance
    vals, vecs = sym_eig(M, est.r)
    return (n / q) * (vecs * vals) @ vecs.T


def _denoise_rows(y: np.ndarray, prior_theta: Prior, Q_lambda: np.ndarray) -> np.ndarray:
    r = Q_lambda.shape[0]
    if r == 1 and prior_theta.dim == 1:
        return posterior_mean(y[:, 0], float(Q_lambda[0, 0]), prior_theta)[:, None]
    M = sqrtm_psd(Q_lambda)
    if prior_theta.kind == "gaussian":
        v = prior_theta.variance
        return y @ (v * M @ np.linalg.inv(v * Q_lambda + np.eye(r))).T
    if not prior_theta.is_discrete:
        raise ContractViolation(f"unsupported prior {prior_theta} for vector denoising")
    pts, w = prior_theta.atoms()
    means = pts @ M.T                                    # M a for each atom
    logits = np.log(np.where(w > 0, w, 1e-300)) + y @ means.T - 0.5 * (means ** 2).sum(1)
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    return p @ pts


def denoise_theta(sample: SpikedSample, est: FactorEstimate, prior_theta: Prior,
                  quadrature_order: int = 61, prior_lambda: Prior | None = None,
                  empirical_q: bool = False) -> ThetaEstimate:
    """Posterior-mean denoising of ``y = A^T Lambda_hat / sqrt(n)`` row by row.

    ``y_j`` behaves like ``Q^{1/2} Theta_j + G``; each row is mapped through
    ``F(y) = E[Theta0 | Q^{1/2} Theta0 + G = y]``. ``Q`` is the prior's second
    moment (``prior_lambda``, else the estimate's stored scale), or the
    empirical second moment of the planted factor when ``empirical_q``.
    """
    del quadrature_order  # posterior means over atoms are exact sums
    if prior_theta.dim != est.r:
        raise ContractViolation("column prior dimension must match the estimate rank")
    if empirical_q:
        Q = sample.Lambda.T @ sample.Lambda / sample.n
    elif prior_lambda is not None:
        Q = prior_lambda.second_moment()
    else:
        Q = est.scale @ est.scale
    y = sample.A.T @ est.Lambda_hat / math.sqrt(sample.n)
    Theta_hat = _denoise_rows(y, prior_theta, Q)
    risk = float(np.sum((Theta_hat - sample.Theta) ** 2) / sample.d)
    return ThetaEstimate(Theta_hat, risk)


def theta_risk_lower_bound(prior_theta: Prior, Q_lambda, quadrature_order: int = 61,
                           mc_samples: int = 1_000_000, rng=None, return_std_err: bool = False):
    """``r q_Theta - E ||E[Theta0 | Q^{1/2} Theta0 + G]||^2``.

    Scalar priors use quadrature (exact for the Gaussian case); vector
    discrete priors use Monte Carlo and can also report the standard error.
    """
    Q = np.atleast_2d(np.asarray(Q_lambda, dtype=float))
    r = Q.shape[0]
    total = float(np.trace(prior_theta.second_moment()))
    if r == 1 and prior_theta.dim == 1:
        value = scalar_mmse(float(Q[0, 0]), prior_theta, quadrature_order)
        return (value, 0.0) if return_std_err else value
    if prior_theta.kind == "gaussian":
        v = prior_theta.variance
        value = float(np.trace(v * np.linalg.inv(np.eye(r) + v * Q)))
        return (value, 0.0) if return_std_err else value
    gen = as_stream(rng).generator(0)
    theta0 = prior_theta.sample(gen, mc_samples)
    y = theta0 @ sqrtm_psd(Q).T + gen.standard_normal((mc_samples, r))
    sq = (_denoise_rows(y, prior_theta, Q) ** 2).sum(axis=1)
    value = total - float(sq.mean())
    se = float(sq.std(ddof=1) / math.sqrt(mc_samples))
    return (value, se) if return_std_err else value
