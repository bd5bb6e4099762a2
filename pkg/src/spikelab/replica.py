"""Replica-symmetric asymptotics for the symmetric spiked model.

The free-energy functional here is

    F(s, Q) = -(s/4)||Q||_F^2
              + E log int exp(sqrt(s) z^T Q^{1/2} l + s l^T Q L0 - (s/2) l^T Q l) dmu(l)

with ``L0 ~ mu``, ``z ~ N(0, I)``. For scalar priors it reduces, with
``gamma = s q``, to ``-gamma^2/(4s) + gamma m2/2 - I(gamma)`` where ``I`` is
the mutual information of the channel ``y = sqrt(gamma) X + G``. Everything
downstream (MMSE and mutual-information limits, thresholds, state evolution)
is built on the scalar channel helpers at the top of this module.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize
from scipy.special import logsumexp, ndtr
from scipy.integrate import cumulative_trapezoid

from .model import Prior
from .numerics import (ContractViolation, NumericalFailure, QuadratureRule, as_stream,
                       gauss_hermite, sqrtm_psd)

UNINFORMATIVE, INFORMATIVE = "uninformative", "informative"
LITERAL, SQUARED = "literal", "squared"


@dataclass(frozen=True)
class ReplicaConfig:
    """Numerical knobs shared by the replica routines."""

    quadrature_order: int = 121
    mc_samples: int = 200_000
    seed: int = 0
    fixed_point_grid: int = 400
    root_tol: float = 1e-13

    @property
    def quad(self) -> QuadratureRule:
        return gauss_hermite(self.quadrature_order)


DEFAULT_CONFIG = ReplicaConfig()


def _quad(quad) -> QuadratureRule:
    if quad is None:
        return DEFAULT_CONFIG.quad
    if isinstance(quad, int):
        return gauss_hermite(quad)
    return quad


def _scalar_atoms(prior: Prior) -> tuple[np.ndarray, np.ndarray]:
    if prior.dim != 1:
        raise ContractViolation(f"expected a scalar prior, got dimension {prior.dim}")
    pts, w = prior.atoms()
    keep = w > 0
    return pts[keep, 0], w[keep]


# ---------------------------------------------------------------------------
# Scalar Gaussian channel  y = sqrt(gamma) X + G
# ---------------------------------------------------------------------------

def _posterior_table(gamma: float, prior: Prior, quad: QuadratureRule):
    """Posterior means on the (true atom, quadrature node) grid.

    Returns ``(atoms, weights, post_mean)`` with ``post_mean[j, i]`` the
    posterior mean when ``X = atoms[j]`` and ``G = nodes[i]``.
    """
    a, w = _scalar_atoms(prior)
    rg = math.sqrt(gamma)
    y = rg * a[:, None] + quad.nodes[None, :]
    logits = np.log(w) + rg * y[..., None] * a - 0.5 * gamma * a * a
    logits -= logits.max(axis=-1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=-1, keepdims=True)
    return a, w, p @ a


def posterior_mean(y, gamma: float, prior: Prior) -> np.ndarray:
    """``E[X | sqrt(gamma) X + G = y]`` elementwise."""
    y = np.asarray(y, dtype=float)
    if prior.kind == "gaussian":
        v = prior.variance
        return math.sqrt(gamma) * v * y / (1.0 + gamma * v)
    a, w = _scalar_atoms(prior)
    rg = math.sqrt(gamma)
    logits = np.log(w) + rg * y[..., None] * a - 0.5 * gamma * a * a
    logits -= logits.max(axis=-1, keepdims=True)
    p = np.exp(logits)
    return (p @ a) / p.sum(axis=-1)


def scalar_mmse(gamma: float, prior: Prior, quad=None) -> float:
    """``E[(X - E[X | sqrt(gamma) X + G])^2]``."""
    if gamma < 0:
        raise ContractViolation(f"gamma must be nonnegative, got {gamma}")
    if prior.kind == "gaussian":
        v = prior.variance
        return v / (1.0 + gamma * v)
    quad = _quad(quad)
    a, w, pm = _posterior_table(gamma, prior, quad)
    err = (a[:, None] - pm) ** 2
    return float(w @ (err @ quad.weights))


def overlap_at(gamma: float, prior: Prior, quad=None) -> tuple[float, float]:
    """Both forms of the planted overlap at SNR ``gamma``.

    Returns ``(E[E[X|y]^2], E[X E[X|y]])``; they coincide for the Bayes
    posterior, which makes the pair a self-consistency check.
    """
    if prior.kind == "gaussian":
        v = prior.variance
        val = gamma * v * v / (1.0 + gamma * v)
        return val, val
    quad = _quad(quad)
    a, w, pm = _posterior_table(gamma, prior, quad)
    sq = float(w @ ((pm ** 2) @ quad.weights))
    cross = float(w @ ((a[:, None] * pm) @ quad.weights))
    return sq, cross


def scalar_mutual_info(gamma: float, prior: Prior, quad=None) -> float:
    """``I(X; sqrt(gamma) X + G)`` in nats."""
    if gamma < 0:
        raise ContractViolation(f"gamma must be nonnegative, got {gamma}")
    if prior.kind == "gaussian":
        return 0.5 * math.log1p(gamma * prior.variance)
    quad = _quad(quad)
    a, w = _scalar_atoms(prior)
    rg = math.sqrt(gamma)
    diff = a[None, :] - a[:, None]                       # [true j, candidate a]
    expo = (rg * quad.nodes[None, :, None] * diff[:, None, :]
            - 0.5 * gamma * diff[:, None, :] ** 2)
    lse = logsumexp(expo, axis=-1, b=w[None, None, :])   # [j, node]
    return float(-(w @ (lse @ quad.weights)))


# ---------------------------------------------------------------------------
# Scalar free energy
# ---------------------------------------------------------------------------

def free_energy_scalar(s: float, q: float, prior_lambda: Prior, quad=None) -> float:
    """``F(s, q)`` for a scalar discrete prior.

    The inner integral over the prior is an exact atom sum; the Gaussian
    expectation uses ``quad``. Continuous priors are rejected; see
    :func:`free_energy_scalar_mc`.
    """
    if s < 0 or q < 0:
        raise ContractViolation("need s >= 0 and q >= 0")
    if not prior_lambda.is_discrete:
        raise ContractViolation(
            "free_energy_scalar needs a discrete prior; use free_energy_scalar_mc for "
            "continuous priors")
    quad = _quad(quad)
    a, w = _scalar_atoms(prior_lambda)
    g = s * q
    rg = math.sqrt(g)
    expo = (rg * quad.nodes[None, :, None] * a[None, None, :]
            + g * a[:, None, None] * a[None, None, :]
            - 0.5 * g * a[None, None, :] ** 2)
    lse = logsumexp(expo, axis=-1, b=w[None, None, :])
    return float(-0.25 * s * q * q + w @ (lse @ quad.weights))


def free_energy_scalar_mc(s: float, q: float, prior_lambda: Prior, mc_samples: int = 200_000,
                          rng=None) -> tuple[float, float]:
    """Monte Carlo ``F(s, q)`` for any scalar prior; returns ``(value, std_err)``.

    The inner integral is exact: an atom sum, or the Gaussian integral in
    closed form.
    """
    if s < 0 or q < 0:
        raise ContractViolation("need s >= 0 and q >= 0")
    gen = as_stream(rng).generator(0)
    x0 = prior_lambda.sample(gen, mc_samples)[:, 0]
    z = gen.standard_normal(mc_samples)
    g = s * q
    b = math.sqrt(g) * z + g * x0
    if prior_lambda.kind == "gaussian":
        v = prior_lambda.variance
        vals = -0.5 * math.log1p(g * v) + 0.5 * b * b * v / (1.0 + g * v)
    else:
        a, w = _scalar_atoms(prior_lambda)
        vals = logsumexp(b[:, None] * a - 0.5 * g * a * a, axis=1, b=w)
    return float(-0.25 * s * q * q + vals.mean()), float(vals.std(ddof=1) / math.sqrt(mc_samples))


def _free_energy_via_info(s: float, q: float, prior: Prior, quad) -> float:
    m2 = float(prior.second_moment()[0, 0])
    g = s * q
    return -0.25 * s * q * q + 0.5 * g * m2 - scalar_mutual_info(g, prior, quad)


# ---------------------------------------------------------------------------
# Simplex prior: exact reduction on the exchangeable family
# ---------------------------------------------------------------------------

_Z_GRID = np.linspace(-12.0, 12.0, 2401)
_Z_WEIGHTS = np.exp(-0.5 * _Z_GRID ** 2)
_Z_WEIGHTS /= _Z_WEIGHTS.sum()


def simplex_log_partition(u: float, k: int, coarse: bool = False) -> float:
    """``E log((1/k)(exp(u + sqrt(u) z_1) + sum_{i>=2} exp(sqrt(u) z_i)))``.

    Evaluated deterministically through ``E log X = int_0^inf (e^{-t} -
    E e^{-tX}) dt/t``; the Laplace transform factorises over the ``k``
    independent summands, so only one-dimensional Gaussian integrals remain.
    The t-integral runs on a log grid.
    """
    if u < 0:
        raise ContractViolation("u must be nonnegative")
    if u == 0.0:
        return 0.0
    z, w = (_Z_GRID[::2], _Z_WEIGHTS[::2] / _Z_WEIGHTS[::2].sum()) if coarse else (_Z_GRID, _Z_WEIGHTS)
    dv = 0.1 if coarse else 0.05
    su = math.sqrt(u)
    v = np.arange(-40.0, math.log(k) + 12.0 * su + u + 5.0, dv)
    t = np.exp(v)[:, None]
    base = np.exp(su * z)[None, :] / k
    psi = np.exp(-t * base) @ w
    psi1 = np.exp(-t * base * math.exp(u)) @ w
    integrand = np.exp(-np.exp(v)) - psi1 * psi ** (k - 1)
    return float(integrand.sum() * dv)


def _simplex_alpha_gain(s: float, alpha: float, k: int, coarse: bool = False) -> float:
    # part of F carried by the component of Q orthogonal to the all-ones vector
    u = s * alpha
    return -0.25 * s * (k - 1) * alpha ** 2 - u * (k + 1) / (2 * k) + simplex_log_partition(u, k, coarse)


def simplex_family(a: float, b: float, k: int) -> tuple[float, float]:
    """``(alpha, beta)`` eigenvalues of ``Q = (a-b) I + b 11^T`` (off / on the ones ray)."""
    return a - b, a + (k - 1) * b


def _check_simplex_ab(a: float, b: float, k: int) -> tuple[float, float]:
    if k < 2:
        raise ContractViolation(f"need k >= 2, got {k}")
    alpha, beta = simplex_family(a, b, k)
    if alpha < -1e-15 or beta < -1e-15:
        raise ContractViolation(f"Q = (a-b)I + b11^T is not PSD for a={a}, b={b}, k={k}")
    return max(alpha, 0.0), max(beta, 0.0)


def free_energy_simplex_exact(s: float, a: float, b: float, k: int) -> float:
    """Deterministic ``F(s, Q)`` for the uniform simplex prior on the exchangeable family."""
    alpha, beta = _check_simplex_ab(a, b, k)
    return -0.25 * s * beta ** 2 + s * beta / (2 * k) + _simplex_alpha_gain(s, alpha, k)


def _simplex_mc_values(s: float, Q: np.ndarray, z: np.ndarray, column: int = 0) -> np.ndarray:
    # per-sample log((1/k) sum_i exp(y_i)) - mean_i y_i, with L0 = e_column
    k = Q.shape[0]
    y = math.sqrt(s) * (z @ sqrtm_psd(Q)) + s * Q[:, column] - 0.5 * s * np.diag(Q)
    return logsumexp(y, axis=1) - math.log(k) - y.mean(axis=1)


def free_energy_matrix(s: float, Q, k: int, mc_samples: int = 200_000, rng=None):
    """Monte Carlo ``F(s, Q)`` for the simplex prior and any PSD ``Q``.

    The planted ``L0`` is averaged exactly over the ``k`` vertices, so ``Q``
    need not be permutation invariant. The z-draws come from sub-stream 0 of
    ``rng``, so repeated calls with the same stream share them (common random
    numbers). The mean of the exponents is subtracted as a control variate
    and added back in closed form. Returns ``(value, std_err)``.
    """
    Q = np.asarray(Q, dtype=float)
    if Q.shape != (k, k):
        raise ContractViolation(f"Q must be {k}x{k}")
    if np.linalg.eigvalsh(0.5 * (Q + Q.T)).min() < -1e-12:
        raise ContractViolation("Q is not PSD")
    z = as_stream(rng).generator(0).standard_normal((mc_samples, k))
    off = Q[~np.eye(k, dtype=bool)]
    exchangeable = np.allclose(np.diag(Q), Q[0, 0]) and (off.size == 0 or np.allclose(off, off[0]))
    columns = [0] if exchangeable else range(k)
    vals = np.mean([_simplex_mc_values(s, Q, z, j) for j in columns], axis=0)
    mean_y = s * Q.sum() / k ** 2 - 0.5 * s * np.trace(Q) / k
    value = -0.25 * s * float(np.sum(Q * Q)) + mean_y + vals.mean()
    return float(value), float(vals.std(ddof=1) / math.sqrt(mc_samples))


def free_energy_simplex(s: float, a: float, b: float, k: int, mc_samples: int = 200_000,
                        rng=None) -> tuple[float, float]:
    """Monte Carlo ``F(s, Q)`` with ``Q = (a-b) I + b 11^T`` and the simplex prior."""
    _check_simplex_ab(a, b, k)
    Q = (a - b) * np.eye(k) + b * np.ones((k, k))
    return free_energy_matrix(s, Q, k, mc_samples, rng)


# ---------------------------------------------------------------------------
# Maximiser of F
# ---------------------------------------------------------------------------

@dataclass
class RSolution:
    """Maximiser of the free energy and the limits it determines."""

    s: float
    q_star: object
    free_energy: float
    mmse_limit: float
    mutual_info_limit: float
    branch: str
    mc_std_err: float = 0.0
    degenerate: bool = False
    converged: bool = True
    uninformative_value: float = 0.0

    def to_dict(self) -> dict:
        out = asdict(self)
        if isinstance(self.q_star, np.ndarray):
            out["q_star"] = self.q_star.tolist()
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _scalar_fixed_points(s: float, prior: Prior, quad, grid: int, tol: float) -> list[float]:
    """Roots of ``q = m2 - mmse(s q)`` on ``[0, m2]``."""
    m2 = float(prior.second_moment()[0, 0])
    if m2 == 0.0 or s == 0.0:
        return [0.0]

    def g(q):
        return m2 - scalar_mmse(s * q, prior, quad) - q

    qs = np.linspace(0.0, m2, grid + 1)
    gs = np.array([g(q) for q in qs])
    roots = [0.0] if abs(gs[0]) <= 1e-14 else []
    # skip the first cell when q = 0 is itself a root
    for i in range(2 if roots else 1, grid + 1):
        if gs[i] == 0.0:
            roots.append(float(qs[i]))
        elif gs[i - 1] * gs[i] < 0:
            roots.append(float(optimize.brentq(g, qs[i - 1], qs[i], xtol=tol,
                                               rtol=4 * np.finfo(float).eps)))
    return roots


def _maximize_scalar(s: float, prior: Prior, config: ReplicaConfig) -> RSolution:
    quad = config.quad
    m2 = float(prior.second_moment()[0, 0])
    if prior.is_discrete:
        def F(q):
            return free_energy_scalar(s, q, prior, quad)
    else:
        def F(q):
            return _free_energy_via_info(s, q, prior, quad)
    roots = _scalar_fixed_points(s, prior, quad, config.fixed_point_grid, config.root_tol)
    f0 = F(0.0)
    informative = [(F(q), q) for q in roots if q > 0.0]
    best_f, best_q = max(informative, default=(-math.inf, 0.0))
    if best_f > f0 + 1e-12:
        branch, f_star, q_star = INFORMATIVE, best_f, best_q
    else:
        branch, f_star, q_star = UNINFORMATIVE, f0, 0.0
    degenerate = bool(informative) and abs(best_f - f0) < 1e-9 and best_q > 1e-6
    return RSolution(
        s=float(s), q_star=float(q_star), free_energy=float(f_star),
        mmse_limit=float(m2 * m2 - q_star * q_star),
        mutual_info_limit=float(0.25 * s * m2 * m2 - f_star),
        branch=branch, degenerate=degenerate, uninformative_value=float(f0))


def _maximize_simplex_alpha(s: float, k: int, n_grid: int = 40) -> tuple[float, float, bool]:
    """Best ``alpha`` in ``(0, 1/k]`` for the orthogonal part; returns ``(alpha, gain, converged)``."""
    hi = 1.0 / k
    alphas = np.geomspace(hi * 1e-4, hi, n_grid)
    gains = np.array([_simplex_alpha_gain(s, a, k) for a in alphas])
    i = int(np.argmax(gains))
    lo_a = alphas[max(i - 1, 0)]
    hi_a = alphas[min(i + 1, n_grid - 1)]
    if hi_a <= lo_a:
        return float(alphas[i]), float(gains[i]), True
    res = optimize.minimize_scalar(lambda a: -_simplex_alpha_gain(s, a, k),
                                   bounds=(lo_a, hi_a), method="bounded",
                                   options={"xatol": 1e-10})
    if -res.fun >= gains[i]:
        return float(res.x), float(-res.fun), bool(res.success)
    return float(alphas[i]), float(gains[i]), bool(res.success)


def _maximize_simplex(s: float, k: int) -> RSolution:
    beta = 1.0 / k
    f0 = s / (4.0 * k * k)
    alpha, gain, ok = _maximize_simplex_alpha(s, k)
    informative = gain > 1e-12
    if not informative:
        alpha, gain = 0.0, 0.0
    P1 = np.ones((k, k)) / k
    Q = alpha * (np.eye(k) - P1) + beta * P1
    f_star = f0 + gain
    return RSolution(
        s=float(s), q_star=Q, free_energy=float(f_star),
        mmse_limit=float(1.0 / k - np.sum(Q * Q)),
        mutual_info_limit=float(0.25 * s / k - f_star),
        branch=INFORMATIVE if informative else UNINFORMATIVE,
        degenerate=bool(0.0 < abs(gain) < 1e-9), converged=ok,
        uninformative_value=float(f0))


def maximize_free_energy(s: float, prior_lambda: Prior, config: ReplicaConfig = DEFAULT_CONFIG) -> RSolution:
    """``sup_Q F(s, Q)`` with the MMSE and mutual-information limits.

    Scalar priors: every root of the first-order condition ``q = m2 -
    mmse(s q)`` is located by a grid scan plus Brent polishing and the best
    is compared with ``q = 0``. Simplex priors: ``Q`` ranges over the
    exchangeable family ``alpha (I - 11^T/k) + beta 11^T/k``; the ``beta``
    part is maximised in closed form (``beta = 1/k``) and ``alpha`` by a
    grid plus bounded search on the deterministic reduction.
    """
    if s < 0:
        raise ContractViolation("s must be nonnegative")
    if prior_lambda.kind == "simplex":
        return _maximize_simplex(s, prior_lambda.k)
    if prior_lambda.dim != 1:
        raise ContractViolation("maximize_free_energy supports scalar and simplex priors")
    return _maximize_scalar(s, prior_lambda, config)


# ---------------------------------------------------------------------------
# Clustering threshold
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Threshold:
    k: int
    q_info: float
    half_width: float
    method: str

    def __float__(self) -> float:
        return self.q_info

    def to_dict(self) -> dict:
        return asdict(self)


def _threshold_ratio(u: float, k: int, coarse: bool = False) -> float:
    # s at which the alpha-gain at u = s * alpha changes sign
    h = simplex_log_partition(u, k, coarse) - u * (k + 1) / (2 * k)
    return (k - 1) * u * u / (4.0 * h) if h > 0 else math.inf


def _threshold_exact(k: int) -> Threshold:
    us = np.geomspace(0.02, 60.0, 60)
    ratios = np.array([_threshold_ratio(u, k) for u in us])
    i = int(np.argmin(ratios))
    s_best, u_best = float(ratios[i]), float(us[i])
    if 0 < i < us.size - 1:
        res = optimize.minimize_scalar(lambda u: _threshold_ratio(u, k),
                                       bounds=(us[i - 1], us[i + 1]), method="bounded",
                                       options={"xatol": 1e-9})
        if res.fun < s_best:
            s_best, u_best = float(res.fun), float(res.x)
    s_info = min(float(k * k), s_best)
    if s_info < k * k:
        # disagreement with a coarser rule bounds the discretisation error
        s_coarse = _threshold_ratio(u_best, k, coarse=True)
        half = max(abs(math.sqrt(s_coarse) - math.sqrt(s_info)), 1e-6)
    else:
        half = 1e-6
    return Threshold(k, math.sqrt(s_info), half, "exact")


def _mc_gap(q: float, k: int, z: np.ndarray) -> tuple[float, float]:
    """``sup_alpha F(q^2, Q_alpha) - F(q^2, Q_0)`` on shared draws ``z``, with its std error."""
    s = q * q
    P1 = np.ones((k, k)) / k
    Q0 = P1 / k
    base = _simplex_mc_values(s, Q0, z)

    def diffs(alpha):
        Q = alpha * (np.eye(k) - P1) + Q0
        mean_y = s * Q[:, 0].mean() - 0.5 * s * np.trace(Q) / k
        mean_y0 = s * Q0[:, 0].mean() - 0.5 * s * np.trace(Q0) / k
        shift = -0.25 * s * (k - 1) * alpha * alpha + mean_y - mean_y0
        return shift, _simplex_mc_values(s, Q, z) - base

    def gap(alpha):
        shift, d = diffs(alpha)
        return shift + d.mean()

    alphas = np.linspace(0.05, 1.0, 20) / k
    vals = [gap(a) for a in alphas]
    i = int(np.argmax(vals))
    lo, hi = alphas[max(i - 1, 0)], alphas[min(i + 1, alphas.size - 1)]
    res = optimize.minimize_scalar(lambda a: -gap(a), bounds=(lo, hi), method="bounded",
                                   options={"xatol": 1e-5})
    best = float(res.x) if -res.fun > vals[i] else float(alphas[i])
    _, d = diffs(best)
    return max(vals[i], -res.fun), float(d.std(ddof=1) / math.sqrt(z.shape[0]))


def _threshold_bisection(k: int, config: ReplicaConfig, target_half_width: float) -> Threshold:
    z = as_stream(config.seed).generator(0).standard_normal((config.mc_samples, k))
    lo, hi = 0.5 * k, 1.05 * k
    if _mc_gap(lo, k, z)[0] > 0:
        raise NumericalFailure(f"threshold bracket failure at q={lo}", lo)
    if _mc_gap(hi, k, z)[0] <= 0:
        raise NumericalFailure(f"threshold bracket failure at q={hi}", hi)
    while hi - lo > 2.0 * target_half_width:
        mid = 0.5 * (lo + hi)
        if _mc_gap(mid, k, z)[0] > 0:
            hi = mid
        else:
            lo = mid
    mid = 0.5 * (lo + hi)
    # Monte Carlo error in the gap, mapped to q through the slope just below
    # the crossing (the gap is flat there, so this is the conservative side)
    w = 0.04 * k
    g_mid, se = _mc_gap(mid, k, z)
    slope = (g_mid - _mc_gap(mid - w, k, z)[0]) / w
    mc_half = 3.0 * se / slope if slope > 0 else math.inf
    return Threshold(k, mid, float(max(0.5 * (hi - lo), mc_half)), "bisection")


def cluster_threshold(k: int, config: ReplicaConfig = DEFAULT_CONFIG, method: str = "exact",
                      target_half_width: float = 0.01) -> Threshold:
    """Information-theoretic clustering threshold ``q_info(k)`` for the simplex prior.

    ``method="exact"`` minimises, over ``u > 0``, the SNR at which the
    orthogonal-part gain turns positive (deterministic, ~1e-6 accurate).
    ``method="bisection"`` bisects on ``q`` the sign of the Monte Carlo gap
    ``sup F - F(Q_0)`` evaluated on common random numbers.
    """
    if k < 2:
        raise ContractViolation(f"k must be >= 2, got {k}")
    if method == "exact":
        return _threshold_exact(k)
    if method == "bisection":
        return _threshold_bisection(k, config, target_half_width)
    raise ContractViolation(f"unknown threshold method {method!r}")


def write_threshold_table(path, thresholds) -> None:
    """CSV with columns ``k,q_info``."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["k", "q_info"])
        for t in thresholds:
            out.writerow([t.k, f"{t.q_info:.6f}"])


# ---------------------------------------------------------------------------
# tanh fixed point and state evolution
# ---------------------------------------------------------------------------

def tanh_fixed_point(q_theta: float, quad=None) -> tuple[float, float]:
    """Largest root of ``s = q^2 E tanh^2(s + sqrt(s) G)`` and ``Phi(sqrt(s*))``.

    The map's right side never exceeds ``q^2``, so the scan runs downward on
    a geometric grid from ``q^2`` and the first sign change is polished with
    Brent's method. ``s* = 0`` when no positive root exists.
    """
    if q_theta < 0:
        raise ContractViolation("q_theta must be nonnegative")
    quad = _quad(quad)
    q2 = q_theta * q_theta
    if q2 == 0.0:
        return 0.0, 0.5

    def g(s):
        return q2 * quad.expect(lambda x: np.tanh(s + math.sqrt(s) * x) ** 2) - s

    grid = np.geomspace(q2 * 1e-9, q2, 600)[::-1]
    prev_s, prev_g = grid[0], g(grid[0])
    s_star = 0.0
    for s in grid[1:]:
        gs = g(s)
        if gs > 0 >= prev_g:
            s_star = optimize.brentq(g, s, prev_s, xtol=1e-14, rtol=4 * np.finfo(float).eps)
            break
        prev_s, prev_g = s, gs
    return float(s_star), float(ndtr(math.sqrt(s_star)))


@dataclass
class SETrace:
    gammas: list
    converged: bool
    fixed_point: float
    degenerate: bool = False

    def overlaps(self, prior: Prior, quad=None) -> list:
        """Predicted ``<f_t, Lambda>/n`` for each ``gamma_t``."""
        m2 = float(prior.second_moment()[0, 0])
        return [m2 - scalar_mmse(max(g, 0.0), prior, quad) for g in self.gammas]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def state_evolution(q_theta: float, prior_lambda: Prior, t_max: int = 500, tol: float = 1e-10,
                    quad=None, cold_start: bool = False) -> SETrace:
    """``gamma_{t+1} = q^2 (m2 - mmse(gamma_t))`` from the spectral seed ``q^2 - 1``.

    ``cold_start`` starts from ``gamma_0 = 1e-6`` instead.
    """
    quad = _quad(quad)
    m2 = float(prior_lambda.second_moment()[0, 0])
    q2 = q_theta * q_theta
    g = 1e-6 if cold_start else q2 - 1.0
    if g <= 0.0:
        return SETrace([float(g)], False, 0.0, degenerate=True)
    gammas = [float(g)]
    for _ in range(t_max):
        nxt = q2 * (m2 - scalar_mmse(g, prior_lambda, quad))
        gammas.append(float(nxt))
        if abs(nxt - g) < tol:
            return SETrace(gammas, True, float(nxt))
        g = nxt
    return SETrace(gammas, False, float(g))


# ---------------------------------------------------------------------------
# Psi stationarity
# ---------------------------------------------------------------------------

class RefineRequested(NumericalFailure):
    """The gamma grid cannot separate neighbouring stationary points."""


def psi_curve(q_theta: float, prior_lambda: Prior, grid: int = 2001, convention: str = LITERAL,
              gamma_max: float | None = None, quad=None) -> tuple[np.ndarray, np.ndarray]:
    """``Psi(gamma) = c^2/4 + gamma^2/(4c) - gamma/2 + I(gamma)`` on a uniform grid.

    ``c = q_theta`` under the literal convention and ``q_theta^2`` under the
    squared one. ``I`` is accumulated from the MMSE by the trapezoid rule.
    """
    if convention not in (LITERAL, SQUARED):
        raise ContractViolation(f"unknown convention {convention!r}")
    if q_theta <= 0:
        raise ContractViolation("q_theta must be positive")
    quad = _quad(quad)
    c = q_theta if convention == LITERAL else q_theta * q_theta
    m2 = float(prior_lambda.second_moment()[0, 0])
    if gamma_max is None:
        gamma_max = 1.5 * c * m2 + 1.0
    gam = np.linspace(0.0, gamma_max, grid)
    mm = np.array([scalar_mmse(g, prior_lambda, quad) for g in gam])
    info = cumulative_trapezoid(0.5 * mm, gam, initial=0.0)
    return gam, 0.25 * c * c + gam ** 2 / (4.0 * c) - 0.5 * gam + info


def psi_stationarity_check(q_theta: float, prior_lambda: Prior, grid: int = 2001,
                           convention: str = LITERAL, quad=None):
    """Whether the first stationary point of ``Psi`` is its global optimum.

    ``Psi`` grows like ``gamma^2`` so the optimum is the global minimum.
    Stationary points are sign changes of the numerical derivative at
    ``gamma > 0``; when there are none the first stationary point is
    ``gamma = 0``. Returns ``(flag, curve)`` with ``curve`` a list of
    ``(gamma, Psi)`` pairs.
    """
    gam, psi = psi_curve(q_theta, prior_lambda, grid, convention, quad=quad)
    step = gam[1] - gam[0]
    dpsi = np.gradient(psi, gam)[1:]
    sgn = np.sign(dpsi)
    changes = np.nonzero(sgn[:-1] * sgn[1:] < 0)[0] + 1
    if changes.size > 1 and np.min(np.diff(changes)) < 2:
        raise RefineRequested("stationary points closer than two grid steps", float(step))
    first = int(changes[0]) + 1 if changes.size else 0
    # a sign change brackets the stationary point; take the better neighbour
    if changes.size:
        first = first - 1 if psi[first - 1] < psi[first] else first
    tol = 2.0 * step * step
    flag = bool(psi[first] <= psi.min() + tol)
    return flag, list(zip(gam.tolist(), psi.tolist()))


# ---------------------------------------------------------------------------
# Finite-n enumeration oracle
# ---------------------------------------------------------------------------

MAX_CONFIGURATIONS = 10_000_000
_ENUM_CHUNK = 500


def enumeration_free_energy(n: int, q_theta: float, prior_lambda: Prior, mc_outer: int = 50_000,
                            rng=None) -> tuple[float, float, float]:
    """Exact-enumeration free energy of the size-``n`` symmetric model.

    ``H(l) = (q^2/2n)<L, l>^2 + (q/2) l^T W l - (q^2/4n)||l||^4`` is summed
    over all ``m^n`` configurations for each outer draw of ``(L, W)``.
    Returns ``(psi_n, info_n, std_err)``; draws are chunked on fixed
    sub-streams so the result does not depend on batch sizes.
    """
    a, w = _scalar_atoms(prior_lambda)
    m = a.size
    if n < 1:
        raise ContractViolation("n must be >= 1")
    if m ** n > MAX_CONFIGURATIONS:
        raise ContractViolation(f"{m}^{n} configurations exceed the budget of {MAX_CONFIGURATIONS}")
    idx = np.indices((m,) * n).reshape(n, -1).T
    conf = a[idx]                                        # [M, n]
    logp = np.log(w)[idx].sum(axis=1)
    iu, ju = np.triu_indices(n, 1)
    feats = np.hstack([conf ** 2, 2.0 * conf[:, iu] * conf[:, ju]])
    quartic = (conf ** 2).sum(axis=1) ** 2
    const = logp - (q_theta ** 2 / (4.0 * n)) * quartic
    stream = as_stream(rng)
    vals = np.empty(mc_outer)
    for c, start in enumerate(range(0, mc_outer, _ENUM_CHUNK)):
        b = min(_ENUM_CHUNK, mc_outer - start)
        gen = stream.generator(c)
        L0 = prior_lambda.sample(gen, b * n)[:, 0].reshape(b, n).T
        diag = gen.standard_normal((n, b)) * math.sqrt(2.0 / n)
        off = gen.standard_normal((iu.size, b)) / math.sqrt(n)
        H = ((q_theta ** 2 / (2.0 * n)) * (conf @ L0) ** 2
             + 0.5 * q_theta * (feats @ np.vstack([diag, off]))
             + const[:, None])
        vals[start:start + b] = logsumexp(H, axis=0) / n
    m2 = float(prior_lambda.second_moment()[0, 0])
    psi_n = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(mc_outer)) if mc_outer > 1 else 0.0
    return psi_n, 0.25 * q_theta ** 2 * m2 * m2 - psi_n, se
