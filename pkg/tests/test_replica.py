import json
import math

import numpy as np
import pytest
from scipy import optimize

from spikelab.model import Prior
from spikelab.numerics import ContractViolation, RngStream, gauss_hermite
from spikelab import replica as R

RAD = Prior.rademacher()
QUAD = gauss_hermite(121)


def rademacher_closed_form(s, q):
    g = s * q
    return -s * q * q / 4 - g / 2 + QUAD.expect(lambda z: np.log(np.cosh(g + math.sqrt(g) * z)))


def test_free_energy_zero_overlap():
    for prior in (RAD, Prior.two_point(0.3), Prior.discrete([-1.0, 0.0, 1.0], [0.25, 0.5, 0.25])):
        assert R.free_energy_scalar(3.0, 0.0, prior) == pytest.approx(0.0, abs=1e-14)


@pytest.mark.parametrize("s,q", [(0.5, 0.2), (4.0, 0.7), (9.0, 0.99)])
def test_free_energy_rademacher_closed_form(s, q):
    assert R.free_energy_scalar(s, q, RAD, QUAD) == pytest.approx(rademacher_closed_form(s, q), abs=1e-10)
    atoms = Prior.discrete([1.0, -1.0], [0.5, 0.5])
    assert R.free_energy_scalar(s, q, atoms, QUAD) == pytest.approx(rademacher_closed_form(s, q), abs=1e-10)


def test_free_energy_identity_with_mutual_information():
    tp = Prior.two_point(0.3)
    for q in (0.05, 0.15):
        assert R.free_energy_scalar(5.0, q, tp) == pytest.approx(R._free_energy_via_info(5.0, q, tp, QUAD), abs=1e-10)


def test_free_energy_mc_agrees_with_quadrature():
    val, se = R.free_energy_scalar_mc(4.0, 0.6, RAD, 400_000, RngStream(3))
    assert abs(val - R.free_energy_scalar(4.0, 0.6, RAD)) < 4 * se
    with pytest.raises(ContractViolation):
        R.free_energy_scalar(1.0, 0.5, Prior.gaussian(1.0))
    # Gaussian prior: F = -s q^2/4 + s q/2 - log(1 + s q)/2
    val, se = R.free_energy_scalar_mc(2.0, 0.5, Prior.gaussian(1.0), 400_000, RngStream(4))
    exact = -2.0 * 0.25 / 4 + 0.5 - 0.5 * math.log(2.0)
    assert abs(val - exact) < 4 * se


def test_maximizer_satisfies_first_order_condition_s4():
    sol = R.maximize_free_energy(4.0, RAD)
    fp = optimize.brentq(lambda q: QUAD.expect(lambda z: np.tanh(4 * q + 2 * math.sqrt(q) * z)) - q, 0.1, 1.0)
    assert sol.q_star == pytest.approx(fp, abs=1e-6)
    assert sol.mmse_limit == pytest.approx(1 - fp ** 2, abs=2e-6)
    grid = np.linspace(0.0, 1.0, 2001)
    best = grid[np.argmax([R.free_energy_scalar(4.0, q, RAD) for q in grid])]
    assert abs(best - sol.q_star) < 1e-3


def test_maximizer_below_one_uninformative():
    for s in (0.2, 0.7, 1.0):
        sol = R.maximize_free_energy(s, RAD)
        assert sol.branch == R.UNINFORMATIVE and sol.q_star == 0.0
        assert sol.mmse_limit == pytest.approx(1.0, abs=1e-6)


def test_rsolution_invariants_and_json():
    sol = R.maximize_free_energy(2.5, Prior.two_point(0.3))
    assert sol.mmse_limit >= 0
    assert sol.free_energy >= sol.uninformative_value
    back = json.loads(sol.to_json())
    assert back["branch"] == sol.branch and back["q_star"] == pytest.approx(sol.q_star)


def test_gaussian_prior_maximizer():
    sol = R.maximize_free_energy(4.0, Prior.gaussian(1.0))
    assert sol.q_star == pytest.approx(0.75, abs=1e-8)


def test_nishimori_at_maximizer():
    for s in (2.0, 4.0):
        sol = R.maximize_free_energy(s, RAD)
        a, b = R.overlap_at(s * sol.q_star, RAD)
        assert abs(a - b) < 1e-6 and abs(a - sol.q_star) < 1e-6


def test_de_bruijn_identity_grid():
    for s in (0.5, 1.5, 2.0, 3.0, 6.0):
        h = 1e-3
        d = (R.maximize_free_energy(s + h, RAD).mutual_info_limit
             - R.maximize_free_energy(s - h, RAD).mutual_info_limit) / (2 * h)
        assert d == pytest.approx(R.maximize_free_energy(s, RAD).mmse_limit / 4, abs=1e-2)


def test_scalar_mmse_examples():
    assert R.scalar_mmse(0.0, Prior.two_point(0.3)) == pytest.approx(0.21)
    g = 2.5
    closed = 1 - QUAD.expect(lambda z: np.tanh(g + math.sqrt(g) * z) ** 2)
    assert R.scalar_mmse(g, RAD, QUAD) == pytest.approx(closed, abs=1e-8)
    assert R.scalar_mmse(1e6, RAD) < 1e-6


def test_mutual_info_derivative_is_half_mmse():
    tp = Prior.two_point(0.3)
    h = 1e-4
    d = (R.scalar_mutual_info(2 + h, tp) - R.scalar_mutual_info(2 - h, tp)) / (2 * h)
    assert d == pytest.approx(R.scalar_mmse(2, tp) / 2, abs=1e-6)


def test_simplex_log_partition_vs_monte_carlo():
    g = RngStream(8).generator()
    u, k = 1.3, 4
    y = math.sqrt(u) * g.standard_normal((1_000_000, k))
    y[:, 0] += u
    vals = np.log(np.exp(y).mean(axis=1))
    assert abs(R.simplex_log_partition(u, k) - vals.mean()) < 4 * vals.std() / 1000


def test_free_energy_simplex_baseline_and_zero():
    k = 4
    v, se = R.free_energy_simplex(9.0, 1 / k ** 2, 1 / k ** 2, k, 50_000, RngStream(1))
    assert math.isfinite(v) and v == pytest.approx(9.0 / (4 * k * k), abs=1e-12)
    v, _ = R.free_energy_simplex(9.0, 0.0, 0.0, k, 1000, RngStream(1))
    assert v == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ContractViolation):
        R.free_energy_simplex(1.0, 0.0, 0.1, 3, 10)


def test_free_energy_simplex_mc_vs_exact():
    for a, b in [(0.3, 0.1), (0.45, 0.05)]:
        v, se = R.free_energy_simplex(6.0, a, b, 3, 200_000, RngStream(2))
        assert abs(v - R.free_energy_simplex_exact(6.0, a, b, 3)) < 4 * se


def test_free_energy_simplex_k2_tensor_quadrature():
    # independent two-dimensional Gauss-Hermite evaluation of F(s, Q) at k = 2
    s, a, b = 5.0, 0.4, 0.1
    Q = np.array([[a, b], [b, a]])
    rule = gauss_hermite(80)
    z1, z2 = np.meshgrid(rule.nodes, rule.nodes, indexing="ij")
    w = np.outer(rule.weights, rule.weights)
    vals, vecs = np.linalg.eigh(Q)
    S = (vecs * np.sqrt(vals)) @ vecs.T
    x = math.sqrt(s) * (S[0, 0] * z1 + S[0, 1] * z2) + s * Q[0, 0] - s * Q[0, 0] / 2
    y = math.sqrt(s) * (S[1, 0] * z1 + S[1, 1] * z2) + s * Q[1, 0] - s * Q[1, 1] / 2
    quad = -s / 4 * np.sum(Q * Q) + np.sum(w * np.logaddexp(x, y)) - math.log(2)
    v, se = R.free_energy_simplex(s, a, b, 2, 200_000, RngStream(3))
    assert abs(v - quad) < 3 * se + 1e-12


def test_simplex_family_matches_unrestricted_k2():
    # random PSD Q of size 2: the exchangeable family attains at least as much
    s = 9.0
    sol = R.maximize_free_energy(s, Prior.simplex(2))
    # feasible overlaps satisfy 0 <= Q <= E[L L^T] = I/2
    g = np.random.default_rng(0)
    best = -np.inf
    for _ in range(30):
        U, _ = np.linalg.qr(g.standard_normal((2, 2)))
        Q = 0.5 * (U * g.random(2)) @ U.T
        v, se = R.free_energy_matrix(s, Q, 2, 50_000, RngStream(4))
        best = max(best, v)
    assert best <= sol.free_energy + 3 * se


def test_simplex_below_threshold_uninformative():
    sol = R.maximize_free_energy(3.5 ** 2, Prior.simplex(4))
    assert sol.branch == R.UNINFORMATIVE
    assert np.allclose(sol.q_star, np.ones((4, 4)) / 16)
    sol = R.maximize_free_energy(5.0 ** 2, Prior.simplex(4))
    assert sol.branch == R.INFORMATIVE and sol.mmse_limit < 3 / 16


def test_threshold_monotone_and_small_k():
    ts = [R.cluster_threshold(k).q_info for k in range(2, 9)]
    assert np.all(np.diff(ts) > 0)
    assert ts[0] == pytest.approx(2.0, abs=1e-6) and ts[2] == pytest.approx(4.0, abs=1e-6)


def test_threshold_bisection_agrees_with_exact():
    config = R.ReplicaConfig(mc_samples=40_000)
    t = R.cluster_threshold(5, config, method="bisection", target_half_width=0.02)
    exact = R.cluster_threshold(5)
    assert math.isfinite(t.half_width)
    assert abs(t.q_info - exact.q_info) <= t.half_width + exact.half_width


def test_threshold_rejects_small_k(tmp_path):
    with pytest.raises(ContractViolation):
        R.cluster_threshold(1)
    R.write_threshold_table(tmp_path / "t.csv", [R.cluster_threshold(2)])
    assert (tmp_path / "t.csv").read_text().splitlines() == ["k,q_info", "2,2.000000"]


def test_tanh_fixed_point_examples():
    assert R.tanh_fixed_point(1.0) == (0.0, 0.5)
    assert R.tanh_fixed_point(0.5) == (0.0, 0.5)
    s, ov = R.tanh_fixed_point(2.0)
    assert s > 0 and 0.5 < ov < 1
    z = RngStream(5).generator().standard_normal(4_000_000)
    mc = 4.0 * np.mean(np.tanh(s + math.sqrt(s) * z) ** 2)
    assert abs(mc - s) < 1e-3 * s + 4 * 4.0 * np.tanh(s + math.sqrt(s) * z).std() / 2000
    assert R.tanh_fixed_point(10.0)[1] > 0.999


def test_state_evolution_consistency():
    tr = R.state_evolution(2.0, RAD)
    assert tr.converged
    assert tr.fixed_point == pytest.approx(R.tanh_fixed_point(2.0)[0], abs=1e-6)
    nxt = 4.0 * (1 - R.scalar_mmse(tr.fixed_point, RAD))
    assert abs(nxt - tr.fixed_point) < 1e-8
    tr3 = R.state_evolution(3.0, RAD)
    assert np.all(np.diff(tr3.gammas) >= 0)
    deg = R.state_evolution(1.0, RAD)
    assert deg.degenerate and not deg.converged
    assert json.loads(tr.to_json())["converged"] is True


def test_psi_curve_endpoint_and_flag():
    gam, psi = R.psi_curve(3.0, RAD)
    assert psi[0] == pytest.approx(9.0 / 4)
    flag, curve = R.psi_stationarity_check(3.0, RAD)
    assert flag and curve[0][0] == 0.0


def test_psi_flag_implies_se_matches_maximizer():
    for q in (1.5, 2.0, 3.0):
        flag, _ = R.psi_stationarity_check(q, RAD, convention=R.SQUARED)
        assert flag
        sol = R.maximize_free_energy(q * q, RAD)
        tr = R.state_evolution(q, RAD)
        assert tr.fixed_point / (q * q) == pytest.approx(sol.q_star, abs=1e-3)


def test_psi_refine_requested_on_close_stationary_points(monkeypatch):
    g = np.linspace(0, 1, 6)
    psi = np.array([0.0, 2.0, 1.0, 0.0, 2.0, 5.0])
    monkeypatch.setattr(R, "psi_curve", lambda *a, **k: (g, psi))
    with pytest.raises(R.RefineRequested):
        R.psi_stationarity_check(2.0, RAD)


def test_enumeration_zero_signal():
    assert R.enumeration_free_energy(4, 0.0, RAD, 10, RngStream(0))[:2] == (0.0, 0.0)


def test_enumeration_n1_hand_formula():
    q = 0.8
    psi, _, _ = R.enumeration_free_energy(1, q, RAD, 500, RngStream(2))
    g = RngStream(2).generator(0)
    L = RAD.sample(g, 500)[:, 0]
    W = g.standard_normal((1, 500))[0] * math.sqrt(2.0)
    H = q * q / 2 * 1.0 + q / 2 * W - q * q / 4
    assert psi == pytest.approx(np.mean(H), abs=1e-12)


def test_enumeration_info_monotone_in_q():
    infos = [R.enumeration_free_energy(6, q, RAD, 4000, RngStream(3)) for q in (0.0, 0.5, 1.0, 1.5)]
    assert infos[0][1] == 0.0
    for (_, a, sa), (_, b, sb) in zip(infos, infos[1:]):
        assert b > 0 and b >= a - 2 * (sa + sb)


def test_enumeration_budget():
    with pytest.raises(ContractViolation):
        R.enumeration_free_energy(24, 1.0, RAD, 1)
