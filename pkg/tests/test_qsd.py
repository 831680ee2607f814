import math

import numpy as np
import pytest
import scipy.sparse as sp

from bpqsd import flow, model as mdl, qsd, simulate as sim
from oracles import dense_qsd, poisson_minus_binomial_pmf

BH = mdl.shipped_1d()


@pytest.fixture(scope="module")
def k10():
    return qsd.build_truncated_kernel(BH, 10, 5.0)


@pytest.fixture(scope="module")
def q10(k10):
    return qsd.conditioned_power_iteration(k10, tol=1e-12)


def test_small_kernel_by_hand():
    k = qsd.build_truncated_kernel(BH, 2, 2.0)
    assert np.allclose(k.states[:, 0], [0.5, 1.0, 1.5, 2.0])
    F = BH.F(np.array([0.5]))[0]
    assert k.absorbed[0] == pytest.approx(0.5 * math.exp(-F), rel=1e-13)


def test_entries_match_direct_convolution(k10):
    P = k10.P.toarray()
    N = 10
    for i in (0, 7, 23):
        n = int(k10.counts[i, 0])
        f = BH.F(np.array([n / N]))[0]
        for j in (0, 9, 15, 30):
            m = int(k10.counts[j, 0])
            assert P[i, j] == pytest.approx(poisson_minus_binomial_pmf(f, n, 1 / N, m - n), abs=1e-14)


def test_row_conservation(k10):
    total = np.asarray(k10.P.sum(axis=1)).ravel() + k10.absorbed + k10.overflow
    assert np.max(np.abs(total - 1.0)) < 1e-12
    assert k10.P.min() >= 0 and k10.P.max() <= 1


def test_face_without_births_has_empty_block():
    m = mdl.beverton_holt([2.0, 0.0], [[1.0, 0.0], [0.0, 1.0]], d=2)
    k = qsd.build_truncated_kernel(m, 4, 2.0)
    # coordinate 2 can only die, so no transition increases it
    P = k.P.tocoo()
    assert np.all(k.counts[P.col, 1] <= k.counts[P.row, 1])


def test_budget_error():
    with pytest.raises(qsd.BudgetError):
        qsd.build_truncated_kernel(BH, 1000, 5.0, budget=100)


def test_radius_below_threshold_warns():
    with pytest.warns(RuntimeWarning):
        qsd.build_truncated_kernel(BH, 10, 1.0)


def test_power_iteration_matches_dense_oracle(k10, q10):
    mu, _ = dense_qsd(k10.P)
    assert q10.residual_tv < 1e-10
    assert qsd.tv(q10.mu, mu) < 1e-8
    assert abs(q10.mu.sum() - 1) < 1e-12 and np.all(q10.mu >= 0)


def test_initial_condition_independence(k10, q10):
    other = qsd.conditioned_power_iteration(k10, nu0=len(k10) - 1, tol=1e-12)
    first = qsd.conditioned_power_iteration(k10, nu0=0, tol=1e-12)
    assert qsd.tv(other.mu, first.mu) < 1e-8
    assert qsd.tv(other.mu, q10.mu) < 1e-8


def test_per_step_survival_is_perron_root(k10, q10):
    _, root = dense_qsd(k10.P)
    assert q10.per_step_survival == pytest.approx(root, abs=1e-12)
    assert q10.lambda_N == pytest.approx(q10.per_step_survival ** 10, rel=1e-12)


def test_single_state_kernel():
    k = qsd.kernel_from_matrix(sp.csr_matrix([[0.7]]))
    est = qsd.conditioned_power_iteration(k)
    assert est.mu.tolist() == [1.0]
    assert est.per_step_survival == pytest.approx(0.7)
    assert qsd.qsd_residual(np.array([1.0]), k) == 0.0


def test_residual_of_uniform_is_positive(k10):
    assert qsd.qsd_residual(np.full(len(k10), 1 / len(k10)), k10) > 0


def test_dead_kernel_raises():
    k = qsd.kernel_from_matrix(sp.csr_matrix(np.zeros((2, 2))))
    with pytest.raises(qsd.ConvergenceError):
        qsd.conditioned_power_iteration(k)


def test_non_convergence_raises(k10):
    with pytest.raises(qsd.ConvergenceError):
        qsd.conditioned_power_iteration(k10, nu0=0, tol=1e-15, max_iter=3)


def test_survival_rate_values():
    est = qsd.QsdEstimate(np.array([1.0]), np.array([[1.0]]), 1e-3, 0.0, 1, 100)
    sr = qsd.survival_rate(est)
    assert sr["lambda_N"] == pytest.approx(0.999 ** 100, rel=1e-14)
    assert sr["lambda_N"] == pytest.approx(0.9048, abs=1e-4)
    one = qsd.QsdEstimate(np.array([1.0]), np.array([[1.0]]), 0.0, 0.0, 1, 10)
    assert qsd.survival_rate(one)["lambda_N"] == 1.0


def test_killing_precision_near_one():
    # the killing probability is carried directly so lambda_N keeps relative accuracy
    k = qsd.build_truncated_kernel(BH, 40)
    est = qsd.conditioned_power_iteration(k, tol=1e-13)
    assert 0 < est.killing < 1e-6
    direct = float(est.mu @ (k.absorbed + k.overflow))
    assert est.killing == pytest.approx(direct, rel=1e-6)


def test_policy_robustness():
    a = qsd.build_truncated_kernel(BH, 10, 4.0, policy="absorb")
    p = qsd.build_truncated_kernel(BH, 10, 4.0, policy="project")
    ma = qsd.conditioned_power_iteration(a).mu
    mp = qsd.conditioned_power_iteration(p).mu
    bound = float(np.max(a.overflow))
    assert qsd.tv(ma, mp) < 10 * bound
    assert np.max(np.abs(np.asarray(p.P.sum(axis=1)).ravel() + p.absorbed - 1)) < 1e-12


def test_fleming_viot_small_checks():
    with pytest.raises(ValueError):
        qsd.fleming_viot_estimate(BH, 10, 1, 10, seed=0)
    res = qsd.fleming_viot_estimate(BH, 10, 500, 400, seed=3)
    assert abs(res.probs.sum() - 1) < 1e-12
    assert 0 <= res.killing < 0.05


def test_foster_check_passes_with_wider_K(k10):
    rep = qsd.foster_search(k10, 3.0)
    assert rep.theta2_realized > 0
    assert rep.spectral_radius_outside < rep.theta1 < rep.theta2
    assert math.isfinite(rep.c1)
    assert rep.passed, rep.checks


def test_foster_unit_K_is_certified_infeasible(k10):
    # any phi1 >= 1 with P phi1 <= theta1 phi1 off K forces theta1 >= rho(P restricted off K)
    rep = qsd.foster_search(k10, 2.0)
    assert rep.theta2_realized > 0
    assert rep.spectral_radius_outside > rep.theta2_realized
    assert not rep.passed


def test_foster_precondition(k10):
    with pytest.raises(ValueError):
        qsd.foster_check(k10, 2.0, 0.9, 0.8)


def test_foster_single_state():
    p = 0.6
    k = qsd.kernel_from_matrix(sp.csr_matrix([[p]]))
    assert qsd.foster_check(k, [0], 0.1, 0.5).checks["B2d"]
    assert not qsd.foster_check(k, [0], 0.1, 0.7).checks["B2d"]


def test_foster_infeasible_theta1(k10):
    rep = qsd.foster_check(k10, 2.0, 1e-3, 0.5)
    assert not rep.checks["B2c"] and math.isinf(rep.c1)


def test_phi1_matches_first_passage_series(k10):
    # E[theta^-tau] by summing the survival series outside K_r
    rep = qsd.foster_search(k10, 3.0)
    out = k10.states[:, 0] > 3.0 + 1e-12
    Q = k10.P.toarray()[np.ix_(out, out)]
    # P(tau = n) = (Q^{n-1} exit)(x); accumulate theta^-n times that
    w = (1 - Q.sum(axis=1)) / rep.theta1
    acc = np.zeros(out.sum())
    for _ in range(3000):
        acc += w
        w = Q @ w / rep.theta1
    assert np.allclose(rep.phi1[out], acc, rtol=1e-8)


def test_support_concentration():
    rec = flow.chain_recurrence(BH, [(0.0, 3.0)], 0.02, 0.05)
    qa = rec.quasiattractors[0]
    x = rec.points(qa)[0]
    point = qsd.QsdEstimate(np.array([1.0]), x[None, :], 0.0, 0.0, 1, 50)
    table = qsd.support_concentration(point, rec, 0.0)
    assert table["classes"][qa] == 1.0 and table["complement"] == 0.0
    far = qsd.QsdEstimate(np.array([1.0]), np.array([[2.5]]), 0.0, 0.0, 1, 50)
    assert qsd.support_concentration(far, rec, 0.0)["complement"] == 1.0


def test_tightness(q10):
    assert qsd.tightness_diagnostic([q10], 5.0)["sup"] == 0.0
    assert qsd.tightness_diagnostic([q10], 0.0)["sup"] == pytest.approx(1.0)
    d = qsd.tightness_diagnostic([q10], 3.0, r_grid=[1, 2, 3, 4])
    assert d["sup"] < 0.05 and d["decreasing_in_r"]


def test_extinction_law_small(q10):
    times = qsd.extinction_times(BH, q10, 5000, sim.stream(1, 2))
    stat, p = qsd.geometric_chi2(times, q10.killing)
    assert p > 1e-3


def test_kernel_csv(tmp_path, k10):
    k10.to_csv(tmp_path / "k.csv")
    lines = (tmp_path / "k.csv").read_text().splitlines()
    assert lines[0] == "row,col,prob" and len(lines) == k10.P.nnz + 1
