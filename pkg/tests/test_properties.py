import math

import numpy as np
from hypothesis import given, settings, strategies as st

from bpqsd import ldp, model as mdl, qsd
from oracles import rate_oracle

BH = mdl.shipped_1d()
BI = mdl.shipped_bistable_2d()

pos = st.floats(0.05, 4.0)
vel = st.floats(-3.0, 3.0)


@settings(max_examples=200, deadline=None)
@given(pos, pos, vel, vel, st.floats(0.0, 1.0))
def test_rate_is_convex_in_velocity(x1, x2, b1, b2, t):
    x = np.array([x1, x2])
    L1 = mdl.local_rate(BI, x, np.array([b1, b2]))
    L2 = mdl.local_rate(BI, x, np.array([b2, b1]))
    Lm = mdl.local_rate(BI, x, t * np.array([b1, b2]) + (1 - t) * np.array([b2, b1]))
    assert Lm <= t * L1 + (1 - t) * L2 + 1e-9


@settings(max_examples=200, deadline=None)
@given(pos, pos, vel)
def test_rate_nonnegative_and_matches_sup(f, m, beta):
    val = float(mdl.coordinate_rate(f, m, beta))
    assert val >= 0
    u = (beta + math.sqrt(beta * beta + 4 * f * m)) / (2 * f)
    if abs(math.log(u)) < 9:
        assert abs(val - rate_oracle(f, m, beta)) < 1e-6


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 5.0), st.integers(1, 10_000), st.floats(-2, 2))
def test_prelimit_mgf_zero_and_finite(x, N, z):
    assert mdl.log_mgf_prelimit(BH, [x], [0.0], N) == 0.0
    assert np.isfinite(mdl.log_mgf_prelimit(BH, [x], [z], N))


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 5.0))
def test_rate_zero_at_drift(x):
    assert mdl.local_rate(BH, [x], mdl.drift(BH, [x])) <= 1e-10


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.3, 2.5), min_size=3, max_size=5), st.lists(st.floats(0.1, 2.0), min_size=4, max_size=4))
def test_refinement_never_increases_action(xs, taus):
    pts = np.array(xs)[:, None]
    path = ldp.PiecewisePath(pts, np.array(taus[: len(xs) - 1]))
    s0 = ldp.action(BH, path)
    out = ldp.path_refine(BH, path, iterations=1)
    assert ldp.action(BH, out) <= s0 + 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=4, max_size=4), st.lists(st.floats(0, 1), min_size=4, max_size=4))
def test_tv_is_a_metric_on_probabilities(a, b):
    p = np.array(a) + 1e-3
    q = np.array(b) + 1e-3
    p /= p.sum()
    q /= q.sum()
    assert 0 <= qsd.tv(p, q) <= 1
    assert math.isclose(qsd.tv(p, q), qsd.tv(q, p))
    assert qsd.tv(p, p) == 0


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 12), st.floats(1.0, 4.0))
def test_kernel_rows_conserve_mass(N, r):
    k = qsd.build_truncated_kernel(BH, N, max(r, 1.0 / N + 1e-9)) if N * r >= 1 else None
    if k is None:
        return
    tot = np.asarray(k.P.sum(axis=1)).ravel() + k.absorbed + k.overflow
    assert np.max(np.abs(tot - 1)) < 1e-12
