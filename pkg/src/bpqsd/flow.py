"""Limiting ODE ``x' = G(x)``: integration, omega-limits and chain recurrence.

Absorption-preserving chain recurrence is computed on a grid.  Nodes are
joined ``u -> v`` when ``v`` lies within ``delta`` of the time-``T`` image of
``u`` and the jump does not leave the boundary collar.  Reachability in that
graph is the pseudo-orbit relation restricted to the grid, so its strongly
connected components with a cycle are the recurrence classes and the sinks of
the condensation are the quasiattractors.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import breadth_first_order, connected_components
from scipy.spatial import cKDTree

from .model import ModelSpec, drift

NEG_CLAMP = 1e-12
NEG_FAIL = 1e-6


class StepSizeError(RuntimeError):
    """Integration left the orthant by more than round-off."""


class ResolutionError(RuntimeError):
    """The probe grid found no recurrent node."""


@dataclass(frozen=True)
class FlowPath:
    samples: np.ndarray
    t_grid: np.ndarray
    step: float

    @property
    def end(self) -> np.ndarray:
        return self.samples[-1]

    def at(self, t) -> np.ndarray:
        """Linear interpolation of the sampled path at times ``t``."""
        t = np.asarray(t, dtype=float)
        return np.stack([np.interp(t, self.t_grid, self.samples[:, i])
                         for i in range(self.samples.shape[1])], axis=-1)


def _clamp(x):
    low = np.min(x)
    if low < -NEG_FAIL:
        raise StepSizeError(f"coordinate reached {low:.3g}; step too large or model violates boundary repulsion")
    return np.where(x < 0, 0.0, x) if low < 0 else x


def _rk4(model, x, h):
    k1 = drift(model, x)
    k2 = drift(model, _clamp_soft(x + 0.5 * h * k1))
    k3 = drift(model, _clamp_soft(x + 0.5 * h * k2))
    k4 = drift(model, _clamp_soft(x + h * k3))
    return x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def _clamp_soft(x):
    # stage points may dip below zero by O(h^4); the drift is only defined on the orthant
    return np.maximum(x, 0.0)


def _steps(T, step):
    n = max(1, int(np.ceil(T / step - 1e-9)))
    return n, T / n


def integrate_flow(model: ModelSpec, x0, T: float, step: float = 0.01) -> FlowPath:
    """Classical RK4 on a uniform grid; ``step`` is shrunk so that it divides ``T``."""
    if T <= 0 or step <= 0:
        raise ValueError("T and step must be positive")
    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    if np.any(x < 0):
        raise ValueError("x0 must be in the nonnegative orthant")
    n, h = _steps(T, step)
    out = np.empty((n + 1, model.d))
    out[0] = x
    for k in range(n):
        x = _clamp(_rk4(model, x, h))
        out[k + 1] = x
    return FlowPath(out, np.linspace(0.0, T, n + 1), h)


def flow_map(model: ModelSpec, X, T: float, step: float = 0.01) -> np.ndarray:
    """Time-``T`` flow of every row of ``X`` (vectorised RK4)."""
    x = np.asarray(X, dtype=float).copy()
    n, h = _steps(T, step)
    for _ in range(n):
        x = _clamp(_rk4(model, x, h))
    return x


def delta_net(points, delta: float) -> np.ndarray:
    """Greedy thinning: keep a point only if it is ``>= delta`` from all kept ones."""
    kept = []
    for p in np.asarray(points, dtype=float):
        if not kept or np.min(np.linalg.norm(np.asarray(kept) - p, axis=1)) >= delta:
            kept.append(p)
    return np.asarray(kept)


def omega_limit_estimate(model: ModelSpec, x0, burn_in: float, horizon: float,
                         step: float = 0.01, delta: float = 1e-3) -> np.ndarray:
    """Samples of the orbit on ``[burn_in, horizon]`` thinned to a ``delta``-net."""
    if not 0 <= burn_in < horizon:
        raise ValueError("need 0 <= burn_in < horizon")
    path = integrate_flow(model, x0, horizon, step)
    tail = path.samples[path.t_grid >= burn_in - 1e-12]
    return delta_net(tail, delta)


def grid_points(box, step: float, d: int) -> np.ndarray:
    box = np.asarray(box, dtype=float)
    if box.ndim == 1:
        box = np.tile(box, (d, 1))
    axes = [np.round(np.arange(lo, hi + step / 2, step), 12) for lo, hi in box]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)


@dataclass
class RecurrenceReport:
    """Recurrence classes of the pseudo-orbit graph on a probe grid.

    ``classes`` holds index arrays into ``grid``; ``interior[k]`` tells
    whether class ``k`` lies off the boundary collar and ``quasiattractor[k]``
    whether it is a sink among interior classes.  ``dag_edges`` is the
    transitive reduction of reachability between classes.
    """

    grid: np.ndarray
    classes: list
    interior: list
    quasiattractor: list
    dag_edges: list
    params: dict
    reach: np.ndarray = field(repr=False, default=None)

    def points(self, k: int) -> np.ndarray:
        return self.grid[self.classes[k]]

    @property
    def interior_classes(self) -> list:
        return [k for k, flag in enumerate(self.interior) if flag]

    @property
    def quasiattractors(self) -> list:
        return [k for k, flag in enumerate(self.quasiattractor) if flag]

    def to_dict(self) -> dict:
        return {
            "params": self.params,
            "classes": [{"points": self.points(k).tolist(), "interior": bool(self.interior[k]),
                         "quasiattractor": bool(self.quasiattractor[k])} for k in range(len(self.classes))],
            "dag_edges": [list(map(int, e)) for e in self.dag_edges],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def collar_mask(grid, grid_step: float) -> np.ndarray:
    return np.any(grid < grid_step - 1e-12, axis=1)


def pseudo_orbit_graph(model: ModelSpec, grid, grid_step: float, delta: float,
                       T: float | Sequence[float], step: float = 0.01) -> sp.csr_matrix:
    """Adjacency matrix of the absorption-preserving ``(delta, T)`` jump graph."""
    grid = np.asarray(grid, dtype=float)
    collar = collar_mask(grid, grid_step)
    tree = cKDTree(grid)
    rows, cols = [], []
    for t in np.atleast_1d(T):
        images = flow_map(model, grid, float(t), step)
        hits = tree.query_ball_point(images, r=delta * (1 - 1e-12))
        for u, vs in enumerate(hits):
            vs = np.asarray(vs, dtype=np.int64)
            if collar[u]:
                vs = vs[collar[vs]]
            rows.append(np.full(len(vs), u, dtype=np.int64))
            cols.append(vs)
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    n = len(grid)
    A = sp.csr_matrix((np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(n, n))
    A.data[:] = 1
    return A


def recurrence_classes(A: sp.csr_matrix):
    """Strong components of ``A`` that carry a cycle, plus class reachability.

    Returns ``(classes, reach)`` with ``classes`` sorted by smallest member
    index and ``reach[i, j]`` true when class ``j`` is reachable from class
    ``i`` (``i != j``).
    """
    ncomp, labels = connected_components(A, directed=True, connection="strong")
    sizes = np.bincount(labels, minlength=ncomp)
    self_loop = np.zeros(ncomp, dtype=bool)
    diag = A.diagonal() > 0
    self_loop[labels[diag]] = True
    recurrent = np.flatnonzero((sizes > 1) | self_loop)
    members = [np.flatnonzero(labels == c) for c in recurrent]
    order = np.argsort([m[0] for m in members]) if members else []
    classes = [members[i] for i in order]
    comp_ids = [int(recurrent[i]) for i in order]

    # reachability on the condensation, by BFS from each recurrent component
    src, dst = A.nonzero()
    C = sp.csr_matrix((np.ones(len(src)), (labels[src], labels[dst])), shape=(ncomp, ncomp))
    C.setdiag(0)
    C.eliminate_zeros()
    k = len(classes)
    reach = np.zeros((k, k), dtype=bool)
    pos = {c: i for i, c in enumerate(comp_ids)}
    for i, c in enumerate(comp_ids):
        seen = breadth_first_order(C, c, directed=True, return_predecessors=False)
        for s in seen:
            j = pos.get(int(s))
            if j is not None and j != i:
                reach[i, j] = True
    return classes, reach


def _hasse(reach: np.ndarray) -> list:
    k = reach.shape[0]
    edges = []
    for i in range(k):
        for j in range(k):
            if reach[i, j] and not np.any(reach[i] & reach[:, j]):
                edges.append((i, j))
    return edges


def chain_recurrence(model: ModelSpec, box, grid_step: float, delta: float,
                     T: float | Sequence[float] = 8.0, step: float = 0.01) -> RecurrenceReport:
    """Recurrence classes and quasiattractors of the flow on a grid over ``box``.

    Parameters
    ----------
    box : array_like
        ``(lo, hi)`` for every coordinate or an array of shape ``(d, 2)``.
    grid_step : float
        Probe-grid spacing; also the width of the boundary collar.
    delta : float
        Pseudo-orbit jump tolerance, must exceed ``grid_step / 2``.
    T : float or sequence of float
        Flight time(s); with several values the edge sets are united.
    """
    if delta <= grid_step / 2:
        raise ValueError("delta must exceed grid_step / 2")
    if np.any(np.atleast_1d(T) <= 0):
        raise ValueError("flight times must be positive")
    grid = grid_points(box, grid_step, model.d)
    A = pseudo_orbit_graph(model, grid, grid_step, delta, T, step)
    classes, reach = recurrence_classes(A)
    if not classes:
        raise ResolutionError("no recurrent node on the grid; refine grid_step or enlarge delta")
    collar = collar_mask(grid, grid_step)
    interior = [not bool(np.any(collar[c])) for c in classes]
    quasi = []
    for i, c in enumerate(classes):
        if not interior[i]:
            quasi.append(False)
            continue
        quasi.append(not any(reach[i, j] for j in range(len(classes)) if interior[j] and j != i))
    params = {"grid_step": grid_step, "delta": delta, "T": np.atleast_1d(T).tolist(), "step": step,
              "box": np.asarray(box, dtype=float).tolist()}
    return RecurrenceReport(grid, classes, interior, quasi, _hasse(reach), params, reach)


def on_boundary(x, tol: float = 0.0) -> bool:
    return bool(np.any(np.asarray(x, dtype=float) <= tol))


def is_ap_pseudo_orbit(model: ModelSpec, points, times, delta: float, T: float,
                       step: float = 0.01, boundary_tol: float = 0.0):
    """Check the three defining conditions of an absorption-preserving pseudo-orbit.

    ``points`` are ``xi_0 .. xi_n`` and ``times`` the flight times
    ``T_1 .. T_{n-1}``.  Returns ``(ok, index)`` where ``index`` is the first
    jump ``xi_i -> xi_{i+1}`` that violates a condition, or ``None``.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    times = np.atleast_1d(np.asarray(times, dtype=float)) if len(times) else np.zeros(0)
    if len(times) != len(pts) - 2:
        raise ValueError("need len(times) == len(points) - 2")
    if np.any(times < T):
        raise ValueError("every flight time must be >= T")
    for i in range(len(pts) - 1):
        if on_boundary(pts[i], boundary_tol) and not on_boundary(pts[i + 1], boundary_tol):
            return False, i
        if i == 0:
            target = pts[0]
        else:
            target = integrate_flow(model, pts[i], float(times[i - 1]), step).end
        if np.linalg.norm(pts[i + 1] - target) >= delta:
            return False, i
    return True, None


@dataclass(frozen=True)
class BasinReport:
    attracting: bool
    checkpoints: np.ndarray
    sup_dist: np.ndarray
    starts: int
    threshold: float


def attractor_basin_check(model: ModelSpec, class_points, radius: float, T_max: float,
                          threshold: float, n_starts: int = 64, step: float = 0.01,
                          checkpoints: int = 20, rng: np.random.Generator | None = None) -> BasinReport:
    """Does the flow pull a ``radius``-neighbourhood of the class into it?

    Starts are drawn uniformly in balls of the given radius around class
    points (plus the axis-extreme offsets), kept only if interior.  The
    verdict is ``attracting`` once ``sup_x dist(phi_t(x), class)`` drops
    below ``threshold`` (usually the grid step) before ``T_max``.
    """
    cls = np.atleast_2d(np.asarray(class_points, dtype=float))
    ts = np.linspace(0.0, T_max, checkpoints + 1)
    if radius <= 0:
        return BasinReport(True, ts, np.zeros_like(ts), 0, threshold)
    rng = rng if rng is not None else np.random.default_rng(0)
    d = cls.shape[1]
    eye = np.vstack([np.eye(d), -np.eye(d)]) * radius
    starts = [c + e for c in cls for e in eye]
    u = rng.normal(size=(n_starts, d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    u *= radius * rng.uniform(size=(n_starts, 1)) ** (1.0 / d)
    starts.extend(cls[rng.integers(len(cls), size=n_starts)] + u)
    starts = np.asarray(starts)
    starts = starts[np.all(starts > 0, axis=1)]
    tree = cKDTree(cls)
    x = starts.copy()
    sup = np.empty(len(ts))
    sup[0] = np.max(tree.query(x)[0]) if len(x) else 0.0
    for k in range(1, len(ts)):
        x = flow_map(model, x, ts[k] - ts[k - 1], step)
        sup[k] = np.max(tree.query(x)[0]) if len(x) else 0.0
    return BasinReport(bool(np.any(sup < threshold)), ts, sup, len(starts), threshold)
