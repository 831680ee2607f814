"""Independent reference computations used by the tests.

None of these call into the package's closed forms; they recompute the
quantities from first principles (numeric maximisation, dense linear
algebra, adaptive quadrature).
"""
import math

import numpy as np
from scipy import integrate, linalg, stats


def golden_max(f, a, b, tol=1e-12, iters=400):
    """Maximise a concave scalar function on ``[a, b]`` by golden-section search."""
    g = (math.sqrt(5) - 1) / 2
    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if b - a < tol:
            break
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - g * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + g * (b - a)
            fd = f(d)
    return max(fc, fd)


def rate_oracle(f, m, beta, lo=-10.0, hi=10.0):
    """``sup_zeta zeta*beta - f(e^zeta - 1) - m(e^-zeta - 1)`` over ``[lo, hi]``."""
    def obj(z):
        return z * beta - f * math.expm1(z) - m * math.expm1(-z)
    return golden_max(obj, lo, hi)


def dense_qsd(P):
    """Left Perron eigenvector of a dense substochastic matrix, normalised to a probability."""
    P = np.asarray(P.toarray() if hasattr(P, "toarray") else P, dtype=float)
    w, vl = linalg.eig(P, left=True, right=False)
    k = int(np.argmax(w.real))
    v = np.abs(vl[:, k].real)
    return v / v.sum(), float(w[k].real)


def quasipotential_1d(F, y, xstar):
    """``int_y^{x*} ln(F(s)/s) ds`` by adaptive quadrature."""
    val, _ = integrate.quad(lambda s: math.log(F(s) / s), y, xstar, epsabs=1e-13, epsrel=1e-12)
    return val


def richardson_trapezoid(g, a, b, levels=12):
    """Romberg table built from composite trapezoid rules (Richardson extrapolation)."""
    R = np.zeros((levels, levels))
    for i in range(levels):
        n = 2 ** i
        x = np.linspace(a, b, n + 1)
        y = np.array([g(t) for t in x])
        R[i, 0] = (b - a) / n * (y.sum() - 0.5 * (y[0] + y[-1]))
        for j in range(1, i + 1):
            R[i, j] = R[i, j - 1] + (R[i, j - 1] - R[i - 1, j - 1]) / (4 ** j - 1)
    return R[levels - 1, levels - 1]


def poisson_minus_binomial_pmf(f, n, p, k):
    """``P(U - V = k)`` for ``U ~ Poi(f)``, ``V ~ Bin(n, p)`` by direct summation."""
    v = np.arange(n + 1)
    return float(np.sum(stats.binom.pmf(v, n, p) * stats.poisson.pmf(k + v, f)))
