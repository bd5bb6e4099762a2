"""Bayes AMP on the symmetric (or Gram-reduced) model with spectral initialisation.

Iterates are kept in natural-parameter form: row ``i`` of ``x^t`` behaves
like ``gamma_t Lambda_i + sqrt(gamma_t) G_i``, so the posterior-mean
denoiser at step ``t`` is the scalar-channel posterior mean at SNR
``gamma_t`` evaluated at ``x / sqrt(gamma_t)``, and its derivative in ``x`` is
the posterior variance.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import softmax

from .cluster import kmeans, overlap
from .model import SYMMETRIC_PAIR, GmmSample, Prior, SpikedSample, gram_reduce
from .numerics import ContractViolation, as_stream, sym_eig
from .replica import state_evolution


@dataclass
class AmpRun:
    """Trace of one AMP run.

    ``empirical_overlaps[t]`` is ``<f_t(x^t), Lambda>/n`` (scalar runs, when
    the planted factor is supplied) or the label overlap (cluster runs).
    """

    iterates: list = field(default_factory=list)
    onsager_terms: list = field(default_factory=list)
    empirical_overlaps: list = field(default_factory=list)
    gammas: list = field(default_factory=list)
    final_vector: np.ndarray | None = None
    labels: np.ndarray | None = None
    trivial: bool = False
    converged: bool = False

    def matrix_estimate(self) -> np.ndarray:
        f = self.final_vector if self.final_vector.ndim == 2 else self.final_vector[:, None]
        return f @ f.T

    def matrix_mse(self, Lambda) -> float:
        """``||f f^T - Lambda Lambda^T||_F^2 / n^2`` without forming n x n matrices."""
        f = self.final_vector if self.final_vector.ndim == 2 else self.final_vector[:, None]
        L = np.asarray(Lambda, dtype=float)
        L = L if L.ndim == 2 else L[:, None]
        n = L.shape[0]
        ff = f.T @ f
        ll = L.T @ L
        fl = f.T @ L
        return float((np.sum(ff * ff) - 2.0 * np.sum(fl * fl) + np.sum(ll * ll)) / n ** 2)

    def to_csv(self, path, predicted=None) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["t", "empirical_overlap", "predicted_overlap"])
            for t, ov in enumerate(self.empirical_overlaps):
                pred = "" if predicted is None or t >= len(predicted) else repr(float(predicted[t]))
                out.writerow([t, repr(float(ov)), pred])


def _denoise(x: np.ndarray, gamma: float, prior: Prior) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and variance of ``Lambda`` given the natural parameter ``x``."""
    if prior.kind == "gaussian":
        v = prior.variance
        return v * x / (1.0 + gamma * v), np.full_like(x, v / (1.0 + gamma * v))
    pts, w = prior.atoms()
    a = pts[:, 0]
    logits = np.log(np.where(w > 0, w, 1e-300)) + x[:, None] * a - 0.5 * gamma * a * a
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    mean = p @ a
    return mean, np.maximum(p @ (a * a) - mean * mean, 0.0)


def _empirical_gamma(x: np.ndarray, m2: float) -> float:
    # E x^2 = gamma^2 m2 + gamma
    e2 = float(np.mean(x * x))
    return (-1.0 + math.sqrt(1.0 + 4.0 * m2 * e2)) / (2.0 * m2) if m2 > 0 else 0.0


def bayes_amp_symmetric(Y, q_theta: float, prior_lambda: Prior, t_max: int = 50, tol: float = 1e-6,
                        rng=None, Lambda=None, onsager: bool = True, empirical_snr: bool = False,
                        min_iter: int = 0) -> AmpRun:
    """Scalar Bayes AMP ``x^{t+1} = q Y f_t(x^t) - q^2 <f_t'> f_{t-1}(x^{t-1})``.

    Starts from ``x^0 = q sqrt(q^2 - 1) sqrt(n) v`` with ``v`` the top
    eigenvector of ``Y``; the first step's memory term uses ``x^0 / q^2`` in
    place of ``f_{-1}``. The denoiser SNR follows state evolution unless
    ``empirical_snr``. For ``q <= 1`` the run is flagged trivial and returns
    the prior mean with labels from the top eigenvector's signs.
    """
    del rng  # deterministic given Y
    Y = np.asarray(Y, dtype=float)
    n = Y.shape[0]
    if prior_lambda.dim != 1:
        raise ContractViolation("bayes_amp_symmetric needs a scalar prior")
    m2 = float(prior_lambda.second_moment()[0, 0])
    _, v = sym_eig(Y, 1)
    v = v[:, 0]
    mean = float(prior_lambda.mean()[0])
    if mean != 0.0 and np.sum(v) * mean < 0:
        v = -v
    run = AmpRun()
    if q_theta <= 1.0:
        run.trivial = True
        run.final_vector = np.full(n, mean)
        run.labels = np.where(v >= 0, 1, -1)
        return run
    q2 = q_theta * q_theta
    schedule = state_evolution(q_theta, prior_lambda, t_max=max(t_max, 1), tol=0.0).gammas
    x = q_theta * math.sqrt(q2 - 1.0) * math.sqrt(n) * v
    f_prev = x / q2
    for t in range(t_max + 1):
        gamma = _empirical_gamma(x, m2) if empirical_snr else schedule[min(t, len(schedule) - 1)]
        f, var = _denoise(x, gamma, prior_lambda)
        run.iterates.append(x)
        run.gammas.append(float(gamma))
        if Lambda is not None:
            run.empirical_overlaps.append(float(f @ np.ravel(Lambda)) / n)
        if t > 0 and t >= min_iter:
            prev = run.iterates[-2]
            change = np.linalg.norm(x / np.linalg.norm(x) - prev / np.linalg.norm(prev))
            if change < tol:
                run.converged = True
                run.final_vector = f
                break
        if t == t_max:
            run.final_vector = f
            break
        b = float(var.mean()) if onsager else 0.0
        coef = q2 * b
        run.onsager_terms.append(coef)
        x_new = q_theta * (Y @ f) - coef * f_prev
        f_prev = f
        x = x_new
    run.labels = np.where(run.final_vector >= 0, 1, -1)
    return run


def _simplex_amp(Y: np.ndarray, q_theta: float, k: int, t_max: int, tol: float, rng,
                 labels_true=None, onsager: bool = True) -> AmpRun:
    """Vector AMP with the simplex posterior-mean denoiser ``softmax(x)``.

    Under an exchangeable SNR matrix the posterior over ``{e_1..e_k}`` given
    the natural parameter is a softmax of ``x``; the memory term uses the
    averaged softmax Jacobian. Initialised from k-means on the top ``k - 1``
    eigenvectors (one-hot, unit scale).
    """
    n = Y.shape[0]
    q2 = q_theta * q_theta
    _, V = sym_eig(Y, max(k - 1, 1))
    init = kmeans(math.sqrt(n) * V, k, rng=as_stream(rng).child(0)).labels
    x = np.eye(k)[init]
    f_prev = np.zeros((n, k))
    run = AmpRun()
    for t in range(t_max + 1):
        f = softmax(x, axis=1)
        run.iterates.append(x)
        if labels_true is not None:
            run.empirical_overlaps.append(overlap(np.argmax(f, axis=1), labels_true, k).overlap)
        if t > 0:
            prev = softmax(run.iterates[-2], axis=1)
            if np.linalg.norm(f - prev) / math.sqrt(n) < tol:
                run.converged = True
                run.final_vector = f
                break
        if t == t_max:
            run.final_vector = f
            break
        B = (np.diag(f.sum(axis=0)) - f.T @ f) / n if onsager else np.zeros((k, k))
        run.onsager_terms.append(B)
        x_new = q_theta * (Y @ f) - q2 * f_prev @ B
        f_prev = f
        x = x_new
    run.labels = np.argmax(run.final_vector, axis=1)
    return run


def amp_cluster(sample, prior_lambda: Prior | None = None, t_max: int = 50, rng=None,
                q_theta: float | None = None, tol: float = 1e-6):
    """Cluster by AMP on ``(A A^T - d I)/sqrt(nd)``.

    Symmetric-pair mixtures (or rank-one weak samples) use the scalar
    Rademacher denoiser and return labels in ``{0, 1}`` (``Lambda = +1`` ->
    0); simplex priors use the vector denoiser and return ``0..k-1``.
    Returns ``(labels, run)``.
    """
    if isinstance(sample, GmmSample):
        q = sample.q_theta if q_theta is None else q_theta
        if sample.variant == SYMMETRIC_PAIR:
            prior = prior_lambda or Prior.rademacher()
            truth = sample.labels
        else:
            prior = prior_lambda or Prior.simplex(sample.k)
            truth = sample.class_labels()
    elif isinstance(sample, SpikedSample):
        if q_theta is None:
            raise ContractViolation("q_theta is required for a plain spiked sample")
        q = q_theta
        prior = prior_lambda or Prior.rademacher()
        truth = sample.Lambda[:, 0] if prior.dim == 1 else np.argmax(sample.Lambda, axis=1)
    else:
        raise ContractViolation(f"unsupported sample type {type(sample).__name__}")
    Y = gram_reduce(sample.A)
    if prior.kind == "simplex":
        run = _simplex_amp(Y, q, prior.k, t_max, tol, rng, truth)
        return run.labels, run
    if prior.dim != 1:
        raise ContractViolation("amp_cluster supports scalar and simplex priors")
    run = bayes_amp_symmetric(Y, q, prior, t_max=t_max, tol=tol, Lambda=truth)
    labels = (run.labels < 0).astype(np.intp)
    return labels, run
