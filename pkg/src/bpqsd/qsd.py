"""Quasi-stationary distributions of the truncated chain.

The exact one-step kernel is assembled on the interior lattice states of
``K_r = {x interior : x.1 <= r}`` from per-coordinate Poisson and Binomial
pmfs.  Mass that leaves ``K_r`` without hitting a face (overflow) is either
killed (``"absorb"``, the default) or moved to the nearest kept state
(``"project"``).  The QSD is the normalised left Perron vector, found by
conditioned power iteration.
"""
from __future__ import annotations

import csv
import itertools
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy import stats
from scipy.spatial import cKDTree

from .model import ModelSpec
from .simulate import return_threshold, stream

PMF_TAIL = 1e-13


class BudgetError(RuntimeError):
    """Too many truncated states for the configured budget."""


class ConvergenceError(RuntimeError):
    """Power iteration did not reach the tolerance or lost all mass."""


@dataclass
class TruncatedKernel:
    """Sub-stochastic kernel on interior lattice states of ``K_r``.

    ``P[i, j]`` is the one-step probability from ``states[i]`` to
    ``states[j]`` with neither a face hit nor an overflow (for the
    ``"project"`` policy the overflow has been folded into ``P``).
    ``absorbed[i] + overflow[i] + P[i].sum() == 1`` up to round-off, where
    ``overflow`` is zero under ``"project"`` and ``redirected`` keeps the mass
    that was moved.
    """

    N: int
    r: float
    d: int
    counts: np.ndarray
    P: sp.csr_matrix
    absorbed: np.ndarray
    overflow: np.ndarray
    redirected: np.ndarray
    policy: str

    @property
    def states(self) -> np.ndarray:
        return self.counts / self.N

    @property
    def killing(self) -> np.ndarray:
        """Per-row probability of leaving the kept states in one step."""
        return self.absorbed + self.overflow

    def __len__(self) -> int:
        return len(self.counts)

    def index(self, x) -> int:
        c = np.round(np.atleast_1d(np.asarray(x, dtype=float)) * self.N).astype(np.int64)
        hit = np.flatnonzero(np.all(self.counts == c, axis=1))
        if not len(hit):
            raise KeyError(f"{x} is not a kept state")
        return int(hit[0])

    def to_csv(self, path) -> None:
        """Sparse triplets ``row, col, prob``."""
        P = self.P.tocoo()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row", "col", "prob"])
            for i, j, v in zip(P.row, P.col, P.data):
                w.writerow([int(i), int(j), repr(float(v))])


def _poisson_pmf(mean: float) -> np.ndarray:
    if mean <= 0:
        return np.ones(1)
    hi = int(stats.poisson.isf(PMF_TAIL, mean)) + 2
    return stats.poisson.pmf(np.arange(hi + 1), mean)


def _coordinate_law(n: int, f: float, N: int):
    """pmf of the next count ``n + U - V`` on ``0 .. len-1``."""
    births = _poisson_pmf(f)
    deaths = stats.binom.pmf(np.arange(n + 1), n, 1.0 / N) if n > 0 else np.ones(1)
    # new = n - V + U: convolve the law of n - V (reversed deaths) with births
    return np.convolve(deaths[::-1], births)


def interior_counts(N: int, r: float, d: int, budget: int) -> np.ndarray:
    top = int(math.floor(r * N + 1e-9))
    if top < d:
        raise ValueError(f"K_r holds no interior lattice state for N={N}, r={r}")
    if d == 1:
        return np.arange(1, top + 1, dtype=np.int64)[:, None]
    total = math.comb(top, d)
    if total > budget:
        raise BudgetError(f"{total} states exceed the budget {budget}")
    pts = [c for c in itertools.product(range(1, top + 1), repeat=d) if sum(c) <= top]
    return np.asarray(pts, dtype=np.int64)


def build_truncated_kernel(model: ModelSpec, N: int, r: float | None = None, policy: str = "absorb",
                           budget: int = 20000) -> TruncatedKernel:
    """Exact transition probabilities between the interior states of ``K_r^N``.

    ``r`` defaults to ``3 * d * sup||F||``.  A ``RuntimeWarning`` is issued
    when ``r`` is below the return threshold of the model.
    """
    if policy not in ("absorb", "project"):
        raise ValueError("policy must be 'absorb' or 'project'")
    if r is None:
        from .model import sup_norm_bound

        r = 3.0 * model.d * sup_norm_bound(model)
    r0 = return_threshold(model)
    if r < r0:
        warnings.warn(f"r={r} is below the return threshold {r0:.3g}", RuntimeWarning, stacklevel=2)
    counts = interior_counts(N, r, model.d, budget)
    n = len(counts)
    if n > budget:
        raise BudgetError(f"{n} states exceed the budget {budget}")
    top = int(math.floor(r * N + 1e-9))
    index = {tuple(c): i for i, c in enumerate(counts)}
    F = model.F(counts / N)
    rows, cols, vals = [], [], []
    absorbed = np.empty(n)
    overflow = np.zeros(n)
    redirected = np.zeros(n)
    tree = cKDTree(counts) if policy == "project" else None
    for i, c in enumerate(counts):
        laws = [_coordinate_law(int(c[k]), float(F[i, k]), N) for k in range(model.d)]
        p_alive = [law[1:] for law in laws]
        # face hit: some coordinate lands on zero; 1 - prod(1 - p0) without cancellation
        absorbed[i] = -math.expm1(sum(math.log1p(-min(law[0], 1.0)) for law in laws))
        total_mass = float(np.prod([math.fsum(law) for law in laws]))
        grids = np.meshgrid(*[np.arange(1, len(p) + 1) for p in p_alive], indexing="ij")
        targets = np.stack([g.ravel() for g in grids], axis=1)
        prob = np.ones(len(targets))
        for k, p in enumerate(p_alive):
            prob = prob * p[targets[:, k] - 1]
        inside = targets.sum(axis=1) <= top
        kept_t, kept_p = targets[inside], prob[inside]
        out_t, out_p = targets[~inside], prob[~inside]
        # pmf truncation tail counts as overflow so every row balances
        tail = max(0.0, 1.0 - total_mass)
        spill = math.fsum(out_p) + tail
        if policy == "project" and spill > 0:
            if len(out_t):
                _, near = tree.query(out_t.astype(float), k=1)
                extra_idx = near
                extra_p = out_p.copy()
            else:
                extra_idx, extra_p = np.zeros(0, dtype=int), np.zeros(0)
            if tail > 0:
                # lost mass sits above the largest count; send it to the farthest kept state
                _, tail_idx = tree.query(np.full((1, model.d), top + 1.0), k=1)
                extra_idx = np.append(extra_idx, tail_idx)
                extra_p = np.append(extra_p, tail)
            rows.append(np.full(len(extra_idx), i))
            cols.append(np.asarray(extra_idx, dtype=np.int64))
            vals.append(extra_p)
            redirected[i] = spill
        else:
            overflow[i] = spill
        rows.append(np.full(len(kept_t), i))
        cols.append(np.fromiter((index[tuple(t)] for t in kept_t), dtype=np.int64, count=len(kept_t)))
        vals.append(kept_p)
    P = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    P.sum_duplicates()
    return TruncatedKernel(N, float(r), model.d, counts, P, absorbed, overflow, redirected, policy)


def kernel_from_matrix(P, killing=None, states=None, N: int = 1) -> TruncatedKernel:
    """Wrap an explicit sub-stochastic matrix (toy kernels, tests)."""
    P = sp.csr_matrix(np.atleast_2d(np.asarray(P, dtype=float)) if not sp.issparse(P) else P)
    n = P.shape[0]
    rowsum = np.asarray(P.sum(axis=1)).ravel()
    absorbed = np.clip(1.0 - rowsum, 0.0, None) if killing is None else np.asarray(killing, dtype=float)
    counts = np.arange(1, n + 1)[:, None] if states is None else np.round(np.asarray(states) * N).astype(np.int64)
    if counts.ndim == 1:
        counts = counts[:, None]
    return TruncatedKernel(N, float(counts.sum(axis=1).max()) / N, counts.shape[1], counts, P, absorbed,
                           np.zeros(n), np.zeros(n), "absorb")


@dataclass
class QsdEstimate:
    """Conditioned fixed point of a truncated kernel.

    ``killing`` is the one-step loss ``1 - per_step_survival`` computed
    directly from the kernel's killing vector, so it stays accurate when the
    survival probability is within round-off of one.
    """

    mu: np.ndarray
    states: np.ndarray
    killing: float
    residual_tv: float
    iterations: int
    N: int
    extra: dict = field(default_factory=dict)

    @property
    def per_step_survival(self) -> float:
        return 1.0 - self.killing

    @property
    def lambda_N(self) -> float:
        return survival_rate(self, self.N)["lambda_N"]

    def to_dict(self) -> dict:
        sr = survival_rate(self, self.N)
        return {"states": self.states.tolist(), "probs": self.mu.tolist(), "per_step_survival": self.per_step_survival,
                "killing": self.killing, "lambda_N": sr["lambda_N"], "one_minus_lambda_N": sr["one_minus_lambda_N"],
                "residual_tv": self.residual_tv, "iterations": self.iterations, "N": self.N}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def tv(p, q) -> float:
    return 0.5 * float(np.sum(np.abs(np.asarray(p) - np.asarray(q))))


def _step(nu, kernel: TruncatedKernel):
    img = kernel.P.T @ nu
    kill = math.fsum(nu * kernel.killing)
    mass = img.sum()
    return img, mass, kill


def conditioned_power_iteration(kernel: TruncatedKernel, nu0=None, tol: float = 1e-12,
                                max_iter: int = 1_000_000) -> QsdEstimate:
    """Iterate ``nu <- nu P / |nu P|`` until successive TV distance drops below ``tol``.

    ``nu0`` defaults to the uniform law; an integer selects a point mass.
    """
    n = len(kernel)
    if nu0 is None:
        nu = np.full(n, 1.0 / n)
    elif np.isscalar(nu0):
        nu = np.zeros(n)
        nu[int(nu0)] = 1.0
    else:
        nu = np.asarray(nu0, dtype=float).copy()
        if np.any(nu < 0) or abs(nu.sum() - 1) > 1e-9:
            raise ValueError("nu0 must be a probability vector")
    for it in range(1, max_iter + 1):
        img, mass, _ = _step(nu, kernel)
        if not mass > 0 or not np.isfinite(mass):
            raise ConvergenceError("all mass absorbed; r too small or the model is subcritical")
        new = img / mass
        gap = tv(new, nu)
        nu = new
        if gap < tol:
            break
    else:
        raise ConvergenceError(f"no convergence after {max_iter} iterations (last TV step {gap:.3g})")
    _, _, kill = _step(nu, kernel)
    est = QsdEstimate(nu, kernel.states, kill, 0.0, it, kernel.N)
    est.residual_tv = qsd_residual(nu, kernel)
    return est


def qsd_residual(mu, kernel: TruncatedKernel) -> float:
    """TV distance between ``mu`` and its one-step image conditioned on survival."""
    mu = np.asarray(mu, dtype=float)
    img = kernel.P.T @ mu
    mass = img.sum()
    if not mass > 0:
        return 1.0
    return tv(mu, img / mass)


def survival_rate(estimate: QsdEstimate, N: int | None = None) -> dict:
    """``lambda_N = (per-step survival)^N`` and the exponential-rate diagnostic.

    ``rate = -(1/N) log(1 - lambda_N)`` is the ``c`` for which
    ``lambda_N = 1 - exp(-c N)``.
    """
    N = estimate.N if N is None else N
    log_s = math.log1p(-estimate.killing) if estimate.killing < 1 else -math.inf
    one_minus = -math.expm1(N * log_s)
    lam = math.exp(N * log_s)
    rate = -math.log(one_minus) / N if one_minus > 0 else math.inf
    return {"N": N, "lambda_N": lam, "one_minus_lambda_N": one_minus, "rate": rate}


# ---------------------------------------------------------------------------
# particle approximation


@dataclass
class FlemingViotResult:
    counts: np.ndarray
    probs: np.ndarray
    N: int
    killing: float
    kills: int
    particle_steps: int

    @property
    def states(self) -> np.ndarray:
        return self.counts / self.N

    @property
    def per_step_survival(self) -> float:
        return 1.0 - self.killing

    def on_kernel(self, kernel: TruncatedKernel) -> np.ndarray:
        """Empirical law on the kernel's states; mass elsewhere is dropped."""
        index = {tuple(c): i for i, c in enumerate(kernel.counts)}
        out = np.zeros(len(kernel))
        for c, p in zip(self.counts, self.probs):
            j = index.get(tuple(c))
            if j is not None:
                out[j] += p
        return out


def fleming_viot_estimate(model: ModelSpec, N: int, particles: int, steps: int,
                          rng: np.random.Generator | None = None, seed: int = 0, x0=None,
                          burn_in: int | None = None) -> FlemingViotResult:
    """Fleming-Viot particle approximation of the QSD.

    Every step all particles move by the chain; a particle that lands on a
    face jumps to the position of a uniformly chosen survivor.  The returned
    law is the occupation measure after ``burn_in`` steps, and the killing
    rate is the fraction of particle-steps that ended on a face.
    """
    if particles < 100:
        raise ValueError("need at least 100 particles")
    rng = rng if rng is not None else stream(seed, 0)
    burn_in = steps // 10 if burn_in is None else burn_in
    if x0 is None:
        x0 = np.full(model.d, max(1, round(N)) / N)
    c = np.tile(np.round(np.asarray(x0, dtype=float) * N).astype(np.int64), (particles, 1))
    if np.any(c <= 0):
        raise ValueError("x0 must be interior")
    occ: dict = {}
    kills = 0
    counted = 0
    for k in range(steps):
        c = c + rng.poisson(model.F(c / N)) - rng.binomial(c, 1.0 / N)
        dead = np.any(c == 0, axis=1)
        nd = int(dead.sum())
        if nd == particles:
            raise ConvergenceError("all particles absorbed in one step; use more particles")
        if nd:
            donors = rng.choice(np.flatnonzero(~dead), size=nd)
            c[dead] = c[donors]
        if k >= burn_in:
            kills += nd
            counted += particles
            uniq, cnt = np.unique(c, axis=0, return_counts=True)
            for u, m in zip(map(tuple, uniq), cnt):
                occ[u] = occ.get(u, 0) + int(m)
    keys = sorted(occ)
    counts = np.asarray(keys, dtype=np.int64).reshape(-1, model.d)
    probs = np.asarray([occ[k] for k in keys], dtype=float)
    probs /= probs.sum()
    return FlemingViotResult(counts, probs, N, kills / counted, kills, counted)


# ---------------------------------------------------------------------------
# Foster-Lyapunov verification


@dataclass
class FosterReport:
    theta1: float
    theta2: float
    theta2_realized: float
    r: float
    c1: float
    spectral_radius_outside: float
    phi1: np.ndarray
    checks: dict

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def to_dict(self) -> dict:
        return {"theta1": self.theta1, "theta2": self.theta2, "theta2_realized": self.theta2_realized,
                "r": self.r, "c1": self.c1, "spectral_radius_outside": self.spectral_radius_outside,
                "checks": self.checks, "passed": self.passed}


def _mask(kernel: TruncatedKernel, K) -> np.ndarray:
    if np.isscalar(K):
        return kernel.states.sum(axis=1) <= float(K) + 1e-12
    K = np.asarray(K)
    if K.dtype == bool:
        return K
    m = np.zeros(len(kernel), dtype=bool)
    m[K.astype(int)] = True
    return m


def realized_theta2(kernel: TruncatedKernel, K) -> float:
    """``min_{x in K} P_x(X_1 in K, no absorption)``."""
    k = _mask(kernel, K)
    to_k = np.asarray(kernel.P[:, k].sum(axis=1)).ravel()
    return float(np.min(to_k[k]))


def foster_check(kernel: TruncatedKernel, K, theta1: float, theta2: float, r: float | None = None) -> FosterReport:
    """Check the Foster-Lyapunov drift conditions exactly on a truncated kernel.

    ``K`` is a radius (``x.1 <= K``), a boolean mask or an index list.  The
    test functions are ``phi_2 = 1_K`` and
    ``phi_1(x) = E_x[theta1^{-tau_hat_r}]``, the latter solved from the
    first-passage system outside ``K_r`` (with ``r`` defaulting to the
    radius of ``K``).  Overflow counts as absorption.  ``phi_1`` is finite
    exactly when the spectral radius of the kernel restricted outside ``K_r``
    is below ``theta1``; otherwise the drift condition is reported infeasible.
    """
    if not theta1 < theta2:
        raise ValueError("need theta1 < theta2")
    kmask = _mask(kernel, K)
    if not np.any(kmask):
        raise ValueError("K holds no kernel state")
    if r is None:
        r = float(np.max(kernel.states[kmask].sum(axis=1)))
    in_r = kernel.states.sum(axis=1) <= r + 1e-12
    P = kernel.P.tocsr()
    out = ~in_r
    phi1 = np.ones(len(kernel))
    rho = 0.0
    feasible = True
    if np.any(out):
        Q = P[out][:, out].toarray()
        rho = float(np.max(np.abs(np.linalg.eigvals(Q)))) if Q.size else 0.0
        if rho >= theta1:
            feasible = False
            phi1[out] = np.inf
        else:
            b = 1.0 - Q.sum(axis=1)
            phi1[out] = np.linalg.solve(theta1 * np.eye(len(Q)) - Q, b)
            feasible = bool(np.all(np.isfinite(phi1)) and np.all(phi1 >= 1 - 1e-9))
    to_k = np.asarray(P[:, kmask].sum(axis=1)).ravel()
    theta2_real = float(np.min(to_k[kmask]))
    checks = {"B1": bool(np.all(to_k[kmask] > 0))}
    checks["B2a"] = feasible and bool(np.min(phi1) >= 1 - 1e-12) and bool(np.max(phi1[kmask]) < np.inf)
    checks["B2b"] = True  # phi_2 = 1_K: equal to 1 on K and bounded by 1
    if feasible:
        P1phi1 = P @ phi1
        slack = P1phi1 - theta1 * phi1
        scale = np.maximum(1.0, phi1)
        checks["B2c"] = bool(np.all(slack[~kmask] <= 1e-10 * scale[~kmask]))
        c1 = float(max(0.0, np.max(slack[kmask])))
    else:
        checks["B2c"] = False
        c1 = math.inf
    checks["B2d"] = bool(np.all(to_k[kmask] >= theta2 - 1e-15))
    return FosterReport(theta1, theta2, theta2_real, float(r), c1, rho, phi1, checks)


def foster_search(kernel: TruncatedKernel, K, r: float | None = None) -> FosterReport:
    """Pick ``theta2`` = realised value and ``theta1`` midway above the outside spectral radius."""
    t2 = realized_theta2(kernel, K)
    probe = foster_check(kernel, K, t2 / 2, t2, r) if t2 > 0 else None
    if probe is None:
        raise ValueError("theta2 realised as zero; K is not self-reachable")
    rho = probe.spectral_radius_outside
    if rho >= t2:
        return probe
    return foster_check(kernel, K, 0.5 * (rho + t2), t2, r)


# ---------------------------------------------------------------------------
# diagnostics against the flow


def support_concentration(estimate: QsdEstimate, recurrence, eps: float, classes=None) -> dict:
    """Mass of ``mu_N`` within ``eps`` of each recurrence class.

    Each state counts towards its nearest class when that class is within
    ``eps``; the rest is the ``complement``.  ``classes`` restricts the
    comparison to the given class indices (default: interior classes).
    """
    classes = recurrence.interior_classes if classes is None else list(classes)
    X = estimate.states
    dist = np.full((len(X), len(classes)), np.inf)
    for j, k in enumerate(classes):
        dist[:, j] = cKDTree(recurrence.points(k)).query(X)[0]
    table = {int(k): 0.0 for k in classes}
    if len(classes):
        nearest = np.argmin(dist, axis=1)
        within = dist[np.arange(len(X)), nearest] <= eps + 1e-12
        for j, k in enumerate(classes):
            table[int(k)] = float(np.sum(estimate.mu[within & (nearest == j)]))
        comp = float(np.sum(estimate.mu[~within]))
    else:
        comp = 1.0
    return {"eps": eps, "classes": table, "complement": comp}


def tightness_diagnostic(estimates, r: float, r_grid=None) -> dict:
    """Tail mass ``mu_N({x.1 > r})`` for each estimate and its supremum over N.

    ``r_grid`` adds a table over several radii with a non-increasing-in-r
    verdict.
    """
    def tail(est, rr):
        return float(np.sum(est.mu[est.states.sum(axis=1) > rr + 1e-12]))

    by_n = {int(e.N): tail(e, r) for e in estimates}
    out = {"r": r, "tail": by_n, "sup": max(by_n.values()) if by_n else 0.0}
    if r_grid is not None:
        grid = sorted(r_grid)
        table = {float(rr): max(tail(e, rr) for e in estimates) for rr in grid}
        vals = list(table.values())
        out["by_r"] = table
        out["decreasing_in_r"] = all(b <= a + 1e-15 for a, b in zip(vals, vals[1:]))
    return out


def sample_from(estimate: QsdEstimate, size: int, rng: np.random.Generator) -> np.ndarray:
    """Lattice points drawn from ``mu``."""
    idx = rng.choice(len(estimate.mu), size=size, p=estimate.mu / estimate.mu.sum())
    return estimate.states[idx]


def extinction_times(model: ModelSpec, estimate: QsdEstimate, samples: int, rng: np.random.Generator,
                     max_steps: int = 10_000_000) -> np.ndarray:
    """Steps until the first face hit for chains started from ``mu``."""
    N = estimate.N
    c = np.round(sample_from(estimate, samples, rng) * N).astype(np.int64)
    tau = np.zeros(samples, dtype=np.int64)
    alive = np.arange(samples)
    k = 0
    while len(alive) and k < max_steps:
        k += 1
        cc = c[alive]
        cc = cc + rng.poisson(model.F(cc / N)) - rng.binomial(cc, 1.0 / N)
        c[alive] = cc
        dead = np.any(cc == 0, axis=1)
        tau[alive[dead]] = k
        alive = alive[~dead]
    if len(alive):
        raise ConvergenceError(f"{len(alive)} chains still alive after {max_steps} steps")
    return tau


def geometric_chi2(times, p: float, bins: int = 20):
    """Chi-square goodness of fit of ``times`` (>= 1) to ``Geometric(p)``.

    Bins are contiguous ranges of roughly equal expected counts; returns
    ``(statistic, pvalue)``.
    """
    times = np.asarray(times)
    n = len(times)
    qs = np.unique(stats.geom.ppf(np.linspace(0, 1, bins + 1)[1:-1], p).astype(np.int64))
    edges = np.concatenate([[0], qs, [np.iinfo(np.int64).max]])
    observed = np.array([np.sum((times > lo) & (times <= hi)) for lo, hi in zip(edges[:-1], edges[1:])])
    cdf = np.array([0.0 if e == 0 else (1.0 if e == edges[-1] else stats.geom.cdf(e, p)) for e in edges])
    expected = n * np.diff(cdf)
    res = stats.chisquare(observed, expected * observed.sum() / expected.sum())
    return float(res.statistic), float(res.pvalue)
