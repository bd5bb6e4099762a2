import json
import math

import numpy as np
import pytest

from spikelab.model import (CUSTOM, ORTHOGONAL_CENTERS, STRONG, SYMMETRIC_PAIR, WEAK, Prior,
                            gram_reduce, load_sample, sample_asymmetric, sample_gmm,
                            sample_symmetric, save_sample, second_moment)
from spikelab.numerics import ContractViolation, RngStream, sym_eig


def test_second_moment_examples():
    assert np.allclose(second_moment(Prior.simplex(3)), np.eye(3) / 3)
    assert second_moment(Prior.two_point(0.5))[0, 0] == pytest.approx(0.25)
    assert np.allclose(second_moment(Prior.discrete([[1, 0], [0, 1]], [0.5, 0.5])), np.eye(2) / 2)


@pytest.mark.parametrize("prior", [Prior.rademacher(), Prior.two_point(0.3), Prior.gaussian(2.0, 2),
                                   Prior.simplex(3), Prior.discrete([-1.0, 0.0, 2.0], [0.2, 0.5, 0.3])])
def test_empirical_second_moment(prior):
    X = prior.sample(RngStream(1).generator(), 1_000_000)
    outer = np.einsum("ni,nj->nij", X, X)
    emp = outer.mean(axis=0)
    se = outer.std(axis=0) / 1000.0
    assert np.all(np.abs(emp - prior.second_moment()) <= 4 * se + 1e-12)


def test_prior_moment_flags():
    assert Prior.rademacher().moment_flags() == {"mean_zero": True, "third_moment_zero": True,
                                                 "degenerate": False}
    flags = Prior.two_point(0.3).moment_flags()
    assert flags["mean_zero"] and not flags["third_moment_zero"]
    assert Prior.discrete([0.0], [1.0]).is_degenerate()


def test_prior_parse_roundtrip():
    for text in ["rademacher", "two-point:0.3", "gaussian:2.0", "gaussian:1.5:3", "simplex:4",
                 "atoms:-1.0,1.0@0.25,0.75"]:
        assert str(Prior.parse(text)) == text
    with pytest.raises(ContractViolation):
        Prior.parse("cauchy:1")


def test_prior_weights_validated():
    with pytest.raises(ContractViolation):
        Prior.discrete([1.0, 2.0], [0.5, 0.6])


def test_signal_scales():
    s = sample_asymmetric(Prior.rademacher(), Prior.gaussian(1.0), 4, 6, WEAK, RngStream(0))
    assert s.s_n == pytest.approx(24 ** -0.25) and s.s_n == pytest.approx(0.4518, abs=1e-4)
    s = sample_asymmetric(Prior.rademacher(), Prior.gaussian(1.0), 100, 50, STRONG, RngStream(0))
    assert s.s_n == 0.1
    s = sample_asymmetric(Prior.rademacher(), Prior.gaussian(1.0), 10, 50, CUSTOM, RngStream(0), s_n=0.3)
    assert s.s_n == 0.3


def test_asymmetric_noise_variance():
    s = sample_asymmetric(Prior.rademacher(), Prior.gaussian(2.0), 200, 500, WEAK, RngStream(2))
    Z = s.A - s.s_n * s.Lambda @ s.Theta.T
    assert abs(Z.var() - 1) < 5 / math.sqrt(200 * 500)


def test_degenerate_prior_gives_noise():
    zero = Prior.discrete([0.0], [1.0])
    s = sample_asymmetric(zero, zero, 100, 400, WEAK, RngStream(3))
    assert abs(s.A.mean()) < 4 / math.sqrt(100 * 400)


def test_dimension_mismatch():
    with pytest.raises(ContractViolation):
        sample_asymmetric(Prior.rademacher(), Prior.gaussian(1.0, 2), 10, 10)


def test_symmetric_sample_goe_statistics():
    s = sample_symmetric(Prior.rademacher(), 400, 0.0, RngStream(4))
    W = s.Y
    assert np.array_equal(W, W.T)
    off = W[np.triu_indices(400, 1)]
    assert abs(off.var() * 400 - 1) < 0.2
    assert abs(np.diag(W).var() * 400 - 2) < 0.4


def test_symmetric_n2_variance_ratio():
    diag, off = [], []
    for i in range(10_000):
        Y = sample_symmetric(Prior.rademacher(), 2, 1.0, RngStream(5, i)).Y
        L = sample_symmetric(Prior.rademacher(), 2, 1.0, RngStream(5, i)).Lambda
        W = Y - 0.5 * L @ L.T
        diag.append(W[0, 0])
        off.append(W[0, 1])
    assert abs(np.var(diag) / np.var(off) - 2) < 0.2


def test_goe_edge_and_bbp():
    top = sym_eig(sample_symmetric(Prior.rademacher(), 1000, 0.0, RngStream(6)).Y, 1)[0][0]
    assert abs(top - 2) < 0.15
    ones = Prior.discrete([1.0], [1.0])
    top = sym_eig(sample_symmetric(ones, 500, 3.0, RngStream(7)).Y, 1)[0][0]
    assert abs(top - (3 + 1 / 3)) < 0.1


def test_gmm_label_frequencies():
    s = sample_gmm(ORTHOGONAL_CENTERS, Prior.gaussian(2.0, 4), 2000, 50, RngStream(8))
    freq = np.bincount(s.labels, minlength=4) / 2000
    assert np.all(np.abs(freq - 0.25) < 3 / math.sqrt(2000))


def test_gmm_pair_cluster_means():
    s = sample_gmm(SYMMETRIC_PAIR, Prior.gaussian(2.0), 400, 300, RngStream(9))
    center = s.centers[:, 0] * s.s_n
    for sign in (1, -1):
        mean = s.A[s.labels == sign].mean(axis=0)
        tol = 4 / math.sqrt(np.sum(s.labels == sign))
        assert np.mean(np.abs(mean - sign * center) < tol) > 0.99


def test_gmm_matches_asymmetric_bitexact():
    g = sample_gmm(SYMMETRIC_PAIR, Prior.gaussian(1.5), 50, 80, RngStream(10, 2))
    a = sample_asymmetric(Prior.rademacher(), Prior.gaussian(1.5), 50, 80, WEAK, RngStream(10, 2))
    assert np.array_equal(g.A, a.A)


def test_gmm_rejects_non_isotropic_centers():
    with pytest.raises(ContractViolation):
        sample_gmm(ORTHOGONAL_CENTERS, Prior.discrete([[1, 0], [0, 2]], [0.5, 0.5]), 10, 10)


def test_gram_reduce_zero_and_noise():
    assert np.allclose(gram_reduce(np.zeros((4, 9))), -1.5 * np.eye(4))
    zero = Prior.discrete([0.0], [1.0])
    s = sample_asymmetric(zero, zero, 100, 10_000, WEAK, RngStream(11))
    ev = np.linalg.eigvalsh(gram_reduce(s))
    assert ev.min() > -2.3 and ev.max() < 2.3


def test_gram_reduce_bbp():
    s = sample_asymmetric(Prior.rademacher(), Prior.gaussian(4.0), 400, 40_000, WEAK, RngStream(12))
    top = sym_eig(gram_reduce(s), 1)[0][0]
    assert abs(top - 4.25) < 0.15


def test_gram_reduce_conditional_mean():
    n, d, R = 20, 2000, 200
    base = sample_asymmetric(Prior.rademacher(), Prior.gaussian(1.0), n, d, WEAK, RngStream(13))
    q = float(base.Theta[:, 0] @ base.Theta[:, 0]) / d
    acc = np.zeros((n, n))
    for r in range(R):
        Z = RngStream(14, r).generator().standard_normal((n, d))
        acc += gram_reduce(base.s_n * base.Lambda @ base.Theta.T + Z)
    err = np.abs(acc / R - (q / n) * base.Lambda @ base.Lambda.T).max()
    assert err < 5 / math.sqrt(R * n)


def test_save_load_roundtrip(tmp_path):
    s = sample_asymmetric(Prior.rademacher(), Prior.gaussian(1.0), 10, 20, STRONG, RngStream(1, 2))
    back = load_sample(save_sample(s, tmp_path / "s.npz"))
    assert np.array_equal(back.A, s.A) and back.regime == STRONG and back.seed == s.seed
    save_sample(s, tmp_path / "s.csv")
    assert np.allclose(np.loadtxt(tmp_path / "s.csv", delimiter=","), s.A)
    meta = json.loads((tmp_path / "s.meta.json").read_text())
    assert {"n", "d", "r", "s_n", "seed"} <= set(meta)
    g = sample_gmm(SYMMETRIC_PAIR, Prior.gaussian(1.0), 10, 20, RngStream(3))
    back = load_sample(save_sample(g, tmp_path / "g.npz"))
    assert np.array_equal(back.labels, g.labels)
