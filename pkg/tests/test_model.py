import math

import numpy as np
import pytest

from bpqsd import model as mdl
from oracles import rate_oracle

BH = mdl.shipped_1d()


def unit_birth():
    # constant birth field F = 1, used only to evaluate the MGF formulas at x = 1
    return mdl.tabulate(lambda x: np.ones_like(x), [np.linspace(0.0, 3.0, 31)])


def test_drift_fixed_point_and_origin():
    assert mdl.drift(BH, [1.0])[0] == pytest.approx(0.0, abs=1e-15)
    assert np.all(mdl.drift(BH, [0.0]) == 0.0)
    assert mdl.drift(BH, [0.5])[0] == pytest.approx(2 * 0.5 / 1.5 - 0.5, rel=1e-14)
    assert mdl.drift(BH, [0.5])[0] == pytest.approx(0.1667, abs=1e-4)


def test_drift_rejects_negative_state():
    with pytest.raises(mdl.DomainError):
        mdl.drift(BH, [-0.1])


def test_families_vanish_on_faces():
    rk = mdl.ricker([1.0, 0.5], [[1.0, 0.2], [0.3, 1.0]], d=2)
    bh = mdl.beverton_holt([2.0, 3.0], [[1.0, 0.5], [0.5, 1.0]], d=2)
    for m in (rk, bh, mdl.shipped_bistable_2d()):
        x = np.array([[0.0, 1.3], [0.7, 0.0]])
        F = m.F(x)
        assert F[0, 0] == 0.0 and F[1, 1] == 0.0
        assert np.all(F >= 0)


def test_bistable_equilibria():
    m = mdl.shipped_bistable_2d()
    for x in ([1.0, 1.0], [2.0, 1.0], [3.0, 1.0]):
        assert np.max(np.abs(mdl.drift(m, x))) < 1e-12
    J = np.zeros((2, 2))
    h = 1e-3
    for j in range(2):
        e = np.eye(2)[j] * h
        J[:, j] = (mdl.drift(m, np.array([2.0, 1.0]) + e) - mdl.drift(m, np.array([2.0, 1.0]) - e)) / (2 * h)
    ev = np.linalg.eigvals(J)
    assert np.sum(ev.real > 0) == 1 and np.sum(ev.real < 0) == 1


def test_sample_increment_origin_and_support():
    rng = np.random.default_rng(1)
    assert np.all(mdl.sample_increment(BH, [0.0], 10, rng, size=1000) == 0)
    N, x = 20, np.array([0.15])
    eta = mdl.sample_increment(BH, x, N, rng, size=200_000)
    assert np.min(x + eta / N) >= 0


def test_sample_increment_mean_matches_drift():
    rng = np.random.default_rng(2)
    N, x = 50, np.array([0.5])
    eta = mdl.sample_increment(BH, x, N, rng, size=1_000_000)[:, 0]
    se = eta.std() / math.sqrt(len(eta))
    assert abs(eta.mean() - mdl.drift(BH, x)[0]) < 3 * se


def test_sample_increment_off_lattice():
    with pytest.raises(mdl.DomainError):
        mdl.sample_increment(BH, [0.123], 10, np.random.default_rng(0))


def test_empirical_mgf_matches_prelimit():
    rng = np.random.default_rng(3)
    N, x, z = 10, np.array([0.7]), 0.1
    eta = mdl.sample_increment(BH, x, N, rng, size=1_000_000)[:, 0]
    w = np.exp(z * eta)
    se = w.std() / math.sqrt(len(w))
    exact = math.exp(mdl.log_mgf_prelimit(BH, x, [z], N))
    assert abs(w.mean() - exact) < 3 * se


def test_log_mgf_values():
    m = unit_birth()
    assert mdl.log_mgf_prelimit(m, [1.0], [0.0], 7) == 0.0
    assert mdl.log_mgf_limit(m, [1.0], [0.0]) == 0.0
    assert mdl.log_mgf_prelimit(m, [1.0], [1.0], 1000) == pytest.approx(1.08596, abs=5e-6)
    assert mdl.log_mgf_limit(m, [1.0], [math.log(2)]) == pytest.approx(0.5, abs=1e-14)
    z = 0.37
    assert mdl.log_mgf_prelimit(m, [1.0], [z], 1) == pytest.approx(math.expm1(z) - z, abs=1e-14)


def test_limit_mgf_against_monte_carlo():
    rng = np.random.default_rng(4)
    z = math.log(2)
    d = rng.poisson(1.0, 1_000_000) - rng.poisson(1.0, 1_000_000)
    w = np.exp(z * d)
    assert abs(w.mean() - math.exp(0.5)) < 4 * w.std() / 1000


def test_mgf_gap_decreases_in_N():
    m = unit_birth()
    zs = np.linspace(-1, 1, 21)[:, None]
    gaps = [np.max(np.abs(mdl.log_mgf_prelimit(m, [1.0], zs, N) - mdl.log_mgf_limit(m, [1.0], zs)))
            for N in (10, 100, 1000, 10_000)]
    assert all(a > b for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] < 1e-3


def test_rate_special_values():
    assert mdl.coordinate_rate(1, 1, 0) == pytest.approx(0.0, abs=1e-15)
    assert mdl.coordinate_rate(0, 1, -1) == pytest.approx(0.0, abs=1e-15)
    assert mdl.coordinate_rate(0, 1, 0) == 1.0
    assert math.isinf(mdl.coordinate_rate(0, 1, 0.5))
    # scalar sup frozen to 8 digits (the rounded figure 0.24523 differs in the 4th digit)
    assert mdl.coordinate_rate(1, 1, 1) == pytest.approx(rate_oracle(1, 1, 1), abs=1e-10)
    assert mdl.coordinate_rate(1, 1, 1) == pytest.approx(0.24514385, abs=1e-8)


def test_rate_degenerate_branches_match_oracle():
    for m, beta in [(1.0, -0.3), (2.0, -2.5), (0.5, -0.01)]:
        assert mdl.coordinate_rate(0.0, m, beta) == pytest.approx(rate_oracle(0.0, m, beta, -30, 30), abs=1e-8)


def test_rate_matches_oracle_random():
    rng = np.random.default_rng(5)
    f = rng.uniform(0.05, 3, 200)
    m = rng.uniform(0.05, 3, 200)
    beta = rng.uniform(-2, 2, 200)
    closed = mdl.coordinate_rate(f, m, beta)
    for i in range(200):
        u = (beta[i] + math.sqrt(beta[i] ** 2 + 4 * f[i] * m[i])) / (2 * f[i])
        if abs(math.log(u)) < 9:
            assert closed[i] == pytest.approx(rate_oracle(f[i], m[i], beta[i]), abs=1e-6)


def test_rate_vanishes_at_drift_and_is_reachable_flag():
    xs = np.linspace(0.01, 5, 1000)[:, None]
    assert np.max(mdl.local_rate(BH, xs, mdl.drift(BH, xs))) <= 1e-10
    z = np.zeros((1, 1))
    assert not mdl.is_reachable(mdl.ricker(1.0, 1.0), z, np.ones((1, 1)))[0]


def test_validator_beverton_holt():
    rep = mdl.validate_assumptions(BH, (0.01, 5.0), 0.01)
    assert rep["passed"]
    assert rep["dissipativity"]["M"] == pytest.approx(4.0)
    assert rep["dissipativity"]["kappa"] == 0.5
    assert rep["dissipativity"]["half_norm_identity"]


def test_validator_subcritical_ricker_fails_repulsion():
    rep = mdl.validate_assumptions(mdl.ricker(-1.0, 1.0), (0.01, 5.0), 0.01)
    assert not rep["boundary_repulsion"]["passed"]
    assert not rep["passed"]


def test_validator_degenerate_region():
    rep = mdl.validate_assumptions(BH, (2.0, 1.0), 0.01)
    assert "error" in rep and rep["passed"] is False


def test_sup_norm_and_lipschitz():
    assert mdl.sup_norm_bound(BH) == 2.0
    xs = np.linspace(0, 50, 5001)
    assert np.max(BH.F(xs[:, None])) <= mdl.sup_norm_bound(BH)
    assert 1.9 < mdl.lipschitz_estimate(BH, (0, 3), 0.01) <= 2.0 + 1e-12


def test_load_model_round_trip(tmp_path):
    import json

    p = tmp_path / "m.json"
    p.write_text(json.dumps({"d": 1, "family": "beverton_holt", "params": {"b": [2.0], "c": [[1.0]]}}))
    m = mdl.load_model(p)
    assert m.F(np.array([1.0]))[0] == pytest.approx(1.0)
    assert mdl.load_model({"family": "bistable_ricker_2d"}).d == 2
    with pytest.raises(ValueError):
        mdl.load_model({"d": 1, "family": "logistic", "params": {}})


def test_custom_table_clamps_outside():
    m = mdl.tabulate(lambda x: 2 * x / (1 + x), [np.linspace(0, 2, 201)])
    assert m.F(np.array([5.0]))[0] == pytest.approx(m.F(np.array([2.0]))[0])
    assert m.F(np.array([1.0]))[0] == pytest.approx(1.0, abs=1e-12)
