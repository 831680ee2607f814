"""Monte Carlo for the scaled chain ``X_{k+1} = X_k + eta_{k+1} / N``.

States are kept as integer counts ``N x`` so paths stay exactly on the
lattice.  Every replicate can be tied to its own Philox stream keyed by
``(seed, replicate)``; batch routines vectorise over replicates and draw
from one stream keyed by ``(seed, batch)``.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .flow import integrate_flow
from .model import DomainError, ModelSpec, on_lattice, sup_norm_bound


def stream(seed: int, *key: int) -> np.random.Generator:
    """Counter-based Philox generator for ``(seed, *key)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, key)])))


def _rng(rng, seed):
    if rng is not None:
        return rng
    return stream(0 if seed is None else seed)


def _counts(x0, N: int, d: int) -> np.ndarray:
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape != (d,):
        raise DomainError(f"x0 must have {d} coordinates")
    if not on_lattice(x0, N):
        raise DomainError(f"x0={x0} is not on the lattice (1/{N})Z^{d}_+")
    return np.round(x0 * N).astype(np.int64)


@dataclass
class LatticePath:
    """A realised trajectory; ``counts[k] = N X_k`` for the stored steps.

    ``thin`` > 1 means only every ``thin``-th state was kept.
    """

    N: int
    counts: np.ndarray
    extinct_at: int | None
    seed: tuple = ()
    thin: int = 1

    @property
    def states(self) -> np.ndarray:
        return self.counts / self.N

    @property
    def steps(self) -> np.ndarray:
        return np.arange(len(self.counts)) * self.thin

    def to_csv(self, path) -> None:
        d = self.counts.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step"] + [f"x_{i + 1}" for i in range(d)])
            for k, row in zip(self.steps, self.states):
                w.writerow([int(k)] + [repr(float(v)) for v in row])


def run_chain(model: ModelSpec, x0, N: int, max_steps: int, rng: np.random.Generator | None = None,
              seed: int | None = None, replicate: int = 0, thin: int = 1,
              stop_at_extinction: bool = True) -> LatticePath:
    """Simulate one path for up to ``max_steps`` steps.

    Without ``rng`` the path uses ``stream(seed, replicate)``.  The path stops
    at the first step where some coordinate is zero unless
    ``stop_at_extinction`` is false, in which case it keeps running inside the
    face (a zero coordinate never revives because ``F_i = 0`` there).
    """
    if rng is None:
        rng = stream(0 if seed is None else seed, replicate)
    c = _counts(x0, N, model.d)
    out = [c.copy()]
    extinct_at = 0 if np.any(c == 0) else None
    k = 0
    while k < max_steps and not (stop_at_extinction and extinct_at is not None):
        x = c / N
        births = rng.poisson(model.F(x))
        deaths = rng.binomial(c, 1.0 / N)
        c = c + births - deaths
        k += 1
        if np.any(c < 0):  # pragma: no cover - impossible for Binomial deaths
            raise AssertionError("negative population")
        if extinct_at is None and np.any(c == 0):
            extinct_at = k
        if k % thin == 0 or (stop_at_extinction and extinct_at == k):
            out.append(c.copy())
    return LatticePath(N, np.asarray(out), extinct_at, (seed, replicate), thin)


@dataclass
class BatchPaths:
    """``counts`` has shape ``(steps + 1, reps, d)``; paths keep evolving after extinction."""

    N: int
    counts: np.ndarray
    extinct_at: np.ndarray  # -1 when the path never touched the boundary

    @property
    def states(self) -> np.ndarray:
        return self.counts / self.N

    def path(self, j: int) -> LatticePath:
        e = int(self.extinct_at[j])
        return LatticePath(self.N, self.counts[:, j], None if e < 0 else e)


def run_chains(model: ModelSpec, x0, N: int, steps: int, reps: int, seed: int = 0,
               batch: int = 0, rng: np.random.Generator | None = None) -> BatchPaths:
    """``reps`` independent paths of ``steps`` steps, vectorised over replicates.

    ``x0`` is one lattice point or an array ``(reps, d)`` of them.
    """
    rng = rng if rng is not None else stream(seed, batch)
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim <= 1:
        c = np.tile(_counts(x0, N, model.d), (reps, 1))
    else:
        if x0.shape != (reps, model.d) or not on_lattice(x0, N):
            raise DomainError("x0 must be lattice points of shape (reps, d)")
        c = np.round(x0 * N).astype(np.int64)
    out = np.empty((steps + 1, reps, model.d), dtype=np.int64)
    out[0] = c
    extinct = np.where(np.any(c == 0, axis=1), 0, -1)
    p = 1.0 / N
    for k in range(1, steps + 1):
        c = c + rng.poisson(model.F(c / N)) - rng.binomial(c, p)
        out[k] = c
        newly = (extinct < 0) & np.any(c == 0, axis=1)
        extinct[newly] = k
    return BatchPaths(N, out, extinct)


@dataclass(frozen=True)
class InterpolatedPath:
    """Piecewise-linear continuous-time extension ``t -> X_hat(t)`` on ``[0, K/N]``."""

    N: int
    states: np.ndarray

    @property
    def horizon(self) -> float:
        return (len(self.states) - 1) / self.N

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if np.any(t < -1e-12) or np.any(t > self.horizon + 1e-12):
            raise ValueError(f"t outside [0, {self.horizon}]")
        s = np.clip(t * self.N, 0, len(self.states) - 1)
        n = np.minimum(np.floor(s).astype(np.int64), len(self.states) - 2) if len(self.states) > 1 \
            else np.zeros_like(s, dtype=np.int64)
        if len(self.states) == 1:
            return np.broadcast_to(self.states[0], s.shape + self.states.shape[1:]).copy()
        w = (s - n)[..., None]
        return self.states[n] + (self.states[n + 1] - self.states[n]) * w


def interpolate(path: LatticePath) -> InterpolatedPath:
    if path.thin != 1:
        raise ValueError("interpolation needs every step; rerun with thin=1")
    return InterpolatedPath(path.N, path.states)


def _flow_times(N: int, T: float, step: float):
    m = max(1, math.ceil((1.0 / N) / step - 1e-9))
    n = int(round(T * N))
    if abs(n - T * N) > 1e-9:
        raise ValueError("T * N must be an integer so lattice times fall on the flow grid")
    return n, m


def lln_deviation(model: ModelSpec, path: InterpolatedPath, T: float, step: float = 0.01) -> float:
    """``D^N_T = sup_{t <= T} ||X_hat(t) - phi_t(X_0)||``.

    The flow is integrated on a grid that refines the lattice times ``n/N``,
    and the supremum is taken over that union of grids.
    """
    if path.horizon < T - 1e-12:
        raise ValueError("path shorter than T")
    n, m = _flow_times(path.N, T, step)
    flow = integrate_flow(model, path.states[0], T, 1.0 / (path.N * m))
    xs = path(flow.t_grid)
    return float(np.max(np.linalg.norm(xs - flow.samples, axis=-1)))


def lln_deviations(model: ModelSpec, batch: BatchPaths, T: float, step: float = 0.01) -> np.ndarray:
    """``D^N_T`` for every replicate of a batch sharing one start point."""
    N = batch.N
    n, m = _flow_times(N, T, step)
    X = batch.states[: n + 1]
    if not np.all(X[0] == X[0, 0]):
        raise ValueError("all replicates must share the starting point")
    flow = integrate_flow(model, X[0, 0], T, 1.0 / (N * m)).samples
    sup = np.zeros(X.shape[1])
    for j in range(m):
        w = j / m
        xs = X[:-1] + (X[1:] - X[:-1]) * w  # (n, reps, d) at t = (k + w)/N
        ph = flow[j: n * m: m]
        sup = np.maximum(sup, np.max(np.linalg.norm(xs - ph[:, None, :], axis=-1), axis=0))
    sup = np.maximum(sup, np.linalg.norm(X[-1] - flow[-1], axis=-1))
    return sup


@dataclass(frozen=True)
class HittingTimes:
    tau_r: int | None
    tau_boundary: int | None

    @property
    def tau_hat(self) -> int | None:
        hits = [t for t in (self.tau_r, self.tau_boundary) if t is not None]
        return min(hits) if hits else None


def hitting_times(path: LatticePath, r: float) -> HittingTimes:
    """First entry into ``K_r = {x interior, x.1 <= r}``, first boundary hit, and their minimum.

    ``None`` marks an event that did not happen within the stored path.
    """
    if r <= 0:
        raise ValueError("r must be positive")
    if path.thin != 1:
        raise ValueError("hitting times need every step")
    X = path.states
    interior = np.all(path.counts > 0, axis=1)
    in_k = interior & (X.sum(axis=1) <= r + 1e-12)
    tr = np.flatnonzero(in_k)
    tb = np.flatnonzero(~interior)
    return HittingTimes(int(tr[0]) if len(tr) else None, int(tb[0]) if len(tb) else None)


def return_threshold(model: ModelSpec) -> float:
    """Total-mass level above which expected births are below expected deaths.

    If ``x.1 > sum_i sup F_i`` the total drift ``1.G(x)`` is negative; this
    is the scale at which return-time moments become uniformly bounded.
    """
    if model.d == 1:
        return sup_norm_bound(model)
    p = model.params
    if model.family == "beverton_holt":
        return float(np.sum(p["b"] / np.diag(p["c"])))
    if model.family == "ricker":
        return float(np.sum(np.exp(p["r"] - 1.0) / np.diag(p["a"])))
    return float(np.sum(np.max(p["values"].reshape(-1, model.d), axis=0)))


@dataclass(frozen=True)
class MomentEstimate:
    mean: float
    ci: tuple
    reps: int
    censored: int
    bound: float
    exceeds_bound: bool
    r0: float


def _first_return(model, x0, N, r, reps, max_steps, rng):
    """tau_hat_r for ``reps`` paths started at ``x0``; ``-1`` if censored."""
    c = np.tile(_counts(x0, N, model.d), (reps, 1))
    tau = np.full(reps, -1, dtype=np.int64)
    alive = np.ones(reps, dtype=bool)

    def settle(k):
        done = alive & (np.any(c == 0, axis=1) | (c.sum(axis=1) <= r * N + 1e-9))
        tau[done] = k
        alive[done] = False

    settle(0)
    k = 0
    while np.any(alive) and k < max_steps:
        k += 1
        idx = np.flatnonzero(alive)
        cc = c[idx]
        c[idx] = cc + rng.poisson(model.F(cc / N)) - rng.binomial(cc, 1.0 / N)
        settle(k)
    return tau


def exp_moment_estimate(model: ModelSpec, x0, N: int, lam: float, r: float, reps: int,
                        rng: np.random.Generator | None = None, seed: int | None = None,
                        c: float = 1.0, max_steps: int | None = None) -> MomentEstimate:
    """Monte Carlo estimate of ``E_x exp((lam / N) tau_hat_r)`` with a 95% normal CI.

    ``exceeds_bound`` flags a CI lower end above ``c * exp(x.1)``.  A relative
    CI width above 20% triggers a ``RuntimeWarning``.
    """
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    rng = _rng(rng, seed)
    r0 = return_threshold(model)
    if r < r0:
        warnings.warn(f"r={r} is below the return threshold r0={r0:.3g}", RuntimeWarning, stacklevel=2)
    max_steps = max_steps if max_steps is not None else 200 * N
    tau = _first_return(model, x0, N, r, reps, max_steps, rng)
    censored = int(np.sum(tau < 0))
    tau = np.where(tau < 0, max_steps, tau)
    vals = np.exp(lam / N * tau)
    mean = float(np.mean(vals))
    half = 1.96 * float(np.std(vals, ddof=1)) / math.sqrt(reps) if reps > 1 else math.inf
    if mean > 0 and 2 * half / mean > 0.2:
        warnings.warn("relative CI width above 20%; increase reps", RuntimeWarning, stacklevel=2)
    bound = c * math.exp(float(np.sum(x0)))
    return MomentEstimate(mean, (mean - half, mean + half), reps, censored, bound, mean - half > bound, r0)


def boundary_radius(model: ModelSpec, T: float, gamma: float, box_hi: float = 10.0,
                    samples: int = 20000) -> float:
    """``delta = min(delta_0, gamma / (2 (T - log(e^T - 1))))``.

    ``delta_0`` is the width of the boundary strip inside which the birth
    rate of the smallest coordinate stays below ``gamma / (2T)``; it is read
    off a sample of ``[0, box_hi]^d`` refined towards the faces.
    """
    delta1 = gamma / (2.0 * (T - math.log(math.expm1(T))))
    target = gamma / (2.0 * T)
    rng = np.random.default_rng(0)
    pts = rng.uniform(0, box_hi, size=(samples, model.d))
    face = rng.integers(model.d, size=samples)
    pts[np.arange(samples), face] = np.geomspace(1e-6, box_hi, samples)
    low = np.argmin(pts, axis=1)
    f_low = model.F(pts)[np.arange(samples), low]
    bad = f_low >= target
    delta0 = float(np.min(pts[bad, low[bad]])) if np.any(bad) else box_hi
    return min(delta0, delta1)


@dataclass(frozen=True)
class AbsorptionProbe:
    x: np.ndarray
    delta: float
    probability: float
    extinct: int
    samples: int
    log_rate: float
    lower_bound: float
    gamma: float

    @property
    def passed(self) -> bool:
        return self.log_rate >= -self.gamma


def boundary_absorption_probe(model: ModelSpec, N: int, T: int, gamma: float, samples: int,
                              x=None, rng: np.random.Generator | None = None,
                              seed: int | None = None) -> AbsorptionProbe:
    """Estimate ``P_x(X_hat(T) in boundary)`` from a start close to a face.

    Without ``x`` the start puts the first coordinate at the smallest lattice
    level ``>= delta`` and the others at 1.  ``lower_bound`` is the explicit
    bound ``-gamma/2 + x_min log(1 - (1 - 1/N)^{NT})`` for ``(1/N) log P``.
    A ``RuntimeWarning`` signals that no absorption was observed.
    """
    if gamma <= 0 or int(T) != T or T < 1:
        raise ValueError("need gamma > 0 and a positive integer T")
    rng = _rng(rng, seed)
    delta = boundary_radius(model, T, gamma)
    if x is None:
        x = np.ones(model.d)
        x[0] = max(1, math.ceil(delta * N - 1e-9)) / N
    x = np.atleast_1d(np.asarray(x, dtype=float))
    steps = int(N * T)
    if np.any(x <= 0):
        p, hits = 1.0, samples
    else:
        tau = _first_return(model, x, N, 0.0, samples, steps, rng)
        hits = int(np.sum(tau >= 0))
        p = hits / samples
    if hits == 0:
        warnings.warn("no absorption observed; probability below the Monte Carlo floor", RuntimeWarning,
                      stacklevel=2)
    log_rate = math.log(p) / N if p > 0 else -math.inf
    xmin = float(np.min(x))
    lower = -gamma / 2 + xmin * math.log1p(-(1 - 1 / N) ** (N * T)) if xmin > 0 else 0.0
    return AbsorptionProbe(x, delta, p, hits, samples, log_rate, lower, gamma)


def write_summary(path, **stats) -> None:
    import json

    Path(path).write_text(json.dumps(stats, indent=2, default=float))
