"""Action functional, graph quasipotential and V-chain recurrence.

The quasipotential ``V(x, y)`` is approximated by shortest paths on a lattice
of interior points.  An edge ``u -> v`` between nearby nodes costs the best
straight-line action ``min_T T * L((u + v) / 2, (v - u) / T)`` over a time
grid; concatenating edges lets the shortest path choose the total duration.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components, dijkstra
from scipy.spatial import cKDTree

from .flow import RecurrenceReport, grid_points
from .model import ModelSpec, local_rate

DEFAULT_TIMES = tuple(0.05 * 2.0 ** k for k in range(9))


@dataclass
class PiecewisePath:
    """Broken line through ``breakpoints`` with ``durations[k]`` spent on segment ``k``."""

    breakpoints: np.ndarray
    durations: np.ndarray
    alpha: float = 0.0

    def __post_init__(self):
        self.breakpoints = np.atleast_2d(np.asarray(self.breakpoints, dtype=float))
        if self.breakpoints.shape[0] == 1 and self.breakpoints.shape[1] > 1 and np.ndim(self.durations) == 1 \
                and len(self.durations) == self.breakpoints.shape[1] - 1:
            self.breakpoints = self.breakpoints.T
        self.durations = np.atleast_1d(np.asarray(self.durations, dtype=float))
        if len(self.durations) != len(self.breakpoints) - 1:
            raise ValueError("need one duration per segment")
        if np.any(self.durations <= 0):
            raise ValueError("durations must be positive")
        if np.any(self.breakpoints <= self.alpha):
            raise ValueError(f"breakpoints must stay more than {self.alpha} away from the boundary")

    @property
    def T(self) -> float:
        return float(np.sum(self.durations))

    @classmethod
    def from_samples(cls, samples, t_grid, alpha: float = 0.0) -> "PiecewisePath":
        return cls(np.asarray(samples), np.diff(np.asarray(t_grid, dtype=float)), alpha)

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        knots = np.concatenate([[0.0], np.cumsum(self.durations)])
        return np.stack([np.interp(t, knots, self.breakpoints[:, i]) for i in range(self.breakpoints.shape[1])],
                        axis=-1)


def segment_actions(model: ModelSpec, path: PiecewisePath, quad_points: int = 4) -> np.ndarray:
    """Gauss-Legendre action of every segment; ``inf`` marks an infeasible segment."""
    if quad_points < 2:
        raise ValueError("need at least two quadrature points per segment")
    nodes, weights = np.polynomial.legendre.leggauss(quad_points)
    s = 0.5 * (nodes + 1.0)
    w = 0.5 * weights
    a = path.breakpoints[:-1]
    b = path.breakpoints[1:]
    tau = path.durations
    vel = (b - a) / tau[:, None]
    pts = a[:, None, :] + (b - a)[:, None, :] * s[None, :, None]
    L = local_rate(model, pts, np.broadcast_to(vel[:, None, :], pts.shape))
    return tau * np.sum(w * L, axis=1)


def action(model: ModelSpec, path: PiecewisePath, quad_points: int = 4) -> float:
    """``S = int_0^T L(phi, phi')`` along a broken line (``inf`` if any segment is infeasible)."""
    seg = segment_actions(model, path, quad_points)
    return float(np.inf) if np.any(np.isinf(seg)) else float(np.sum(seg))


def first_infeasible_segment(model: ModelSpec, path: PiecewisePath, quad_points: int = 4):
    seg = segment_actions(model, path, quad_points)
    bad = np.flatnonzero(np.isinf(seg))
    return int(bad[0]) if len(bad) else None


# ---------------------------------------------------------------------------
# graph quasipotential


def _offsets(d: int, ring: int) -> np.ndarray:
    offs = [o for o in itertools.product(range(-ring, ring + 1), repeat=d) if any(o)]
    return np.asarray(offs, dtype=np.int64)


@dataclass
class ActionGraph:
    """Interior lattice and its straight-segment edge costs (CSR)."""

    nodes: np.ndarray
    index: np.ndarray
    shape: tuple
    costs: sp.csr_matrix
    grid_step: float
    alpha: float
    times: tuple
    ring: int

    def nearest(self, x) -> int:
        return int(cKDTree(self.nodes).query(np.atleast_1d(np.asarray(x, dtype=float)))[1])


def edge_cost(model: ModelSpec, u, v, times=DEFAULT_TIMES) -> np.ndarray:
    """``min_T T * L((u + v)/2, (v - u)/T)`` for arrays of endpoints."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    mid = 0.5 * (u + v)
    disp = v - u
    best = np.full(mid.shape[:-1], np.inf)
    for T in times:
        best = np.minimum(best, T * local_rate(model, mid, disp / T))
    return best


def action_graph(model: ModelSpec, box, grid_step: float, times=DEFAULT_TIMES, ring: int = 3,
                 alpha: float | None = None) -> ActionGraph:
    """Lattice ``grid_step * Z^d`` inside ``box`` minus the ``alpha`` collar, with edge costs.

    ``alpha`` defaults to ``2 * grid_step``.
    """
    alpha = 2 * grid_step if alpha is None else alpha
    box = np.asarray(box, dtype=float)
    if box.ndim == 1:
        box = np.tile(box, (model.d, 1))
    axes = []
    for lo, hi in box:
        start = max(lo, alpha)
        k0 = math.ceil(start / grid_step - 1e-9)
        if k0 * grid_step <= alpha + 1e-12:
            k0 += 1
        k1 = math.floor(hi / grid_step + 1e-9)
        axes.append(np.arange(k0, k1 + 1))
    if any(len(a) == 0 for a in axes):
        raise ValueError("box holds no interior grid node")
    shape = tuple(len(a) for a in axes)
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, model.d)
    nodes = np.round(mesh * grid_step, 12)
    n = len(nodes)
    index = np.arange(n).reshape(shape)
    lo_idx = np.array([a[0] for a in axes])
    rows, cols, vals = [], [], []
    for off in _offsets(model.d, ring):
        tgt = mesh + off
        ok = np.all((tgt >= lo_idx) & (tgt < lo_idx + np.array(shape)), axis=1)
        src = np.flatnonzero(ok)
        dst = np.ravel_multi_index(tuple((tgt[ok] - lo_idx).T), shape)
        c = edge_cost(model, nodes[src], nodes[dst], times)
        fin = np.isfinite(c)
        rows.append(src[fin])
        cols.append(dst[fin])
        # csgraph treats explicit zeros as missing edges
        vals.append(np.maximum(c[fin], 1e-300))
    costs = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    return ActionGraph(nodes, index, shape, costs, grid_step, alpha, tuple(times), ring)


@dataclass
class QuasipotentialField:
    """Graph values ``V(source, y)`` on the interior nodes."""

    nodes: np.ndarray
    source: np.ndarray
    source_index: int
    values: np.ndarray
    params: dict = field(default_factory=dict)

    def value_at(self, y) -> float:
        i = int(cKDTree(self.nodes).query(np.atleast_1d(np.asarray(y, dtype=float)))[1])
        return float(self.values[i])

    def to_csv(self, path) -> None:
        d = self.nodes.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x_{i + 1}" for i in range(d)] + ["V"])
            for x, v in zip(self.nodes, self.values):
                w.writerow([repr(float(c)) for c in x] + [repr(float(v))])


def quasipotential_field(model: ModelSpec, box, grid_step: float, source, times=DEFAULT_TIMES,
                         ring: int = 3, alpha: float | None = None, graph: ActionGraph | None = None
                         ) -> QuasipotentialField:
    """Shortest-path quasipotential from ``source`` (snapped to the nearest node).

    Unreachable nodes get ``inf``.
    """
    g = graph if graph is not None else action_graph(model, box, grid_step, times, ring, alpha)
    src = g.nearest(source)
    vals = dijkstra(g.costs, directed=True, indices=src)
    vals[src] = 0.0
    params = {"grid_step": grid_step, "times": list(g.times), "ring": g.ring, "alpha": g.alpha}
    return QuasipotentialField(g.nodes, g.nodes[src], src, vals, params)


@dataclass
class VClassReport:
    nodes: np.ndarray
    classes: list
    quasiattractor: list
    dag_edges: list
    eps_V: float
    matches: list = field(default_factory=list)
    unmatched_v: list = field(default_factory=list)
    unmatched_ap: list = field(default_factory=list)

    def points(self, k: int) -> np.ndarray:
        return self.nodes[self.classes[k]]

    @property
    def quasiattractors(self) -> list:
        return [k for k, f in enumerate(self.quasiattractor) if f]

    def to_dict(self) -> dict:
        return {
            "eps_V": self.eps_V,
            "classes": [{"points": self.points(k).tolist(), "quasiattractor": bool(self.quasiattractor[k])}
                        for k in range(len(self.classes))],
            "dag_edges": [list(map(int, e)) for e in self.dag_edges],
            "matches": self.matches, "unmatched_v": self.unmatched_v, "unmatched_ap": self.unmatched_ap,
        }


def zero_cost_graph(g: ActionGraph, eps_V: float) -> sp.csr_matrix:
    """``u -> v`` whenever the graph quasipotential ``V(u, v) < eps_V``."""
    D = dijkstra(g.costs, directed=True, limit=eps_V)
    np.fill_diagonal(D, np.inf)
    rows, cols = np.nonzero(D < eps_V)
    n = len(g.nodes)
    return sp.csr_matrix((np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(n, n))


def _set_distance(a, b) -> float:
    return float(np.min(cKDTree(b).query(a)[0]))


def v_chain_classes(model: ModelSpec, box, grid_step: float, eps_V: float, times=DEFAULT_TIMES,
                    ring: int = 3, alpha: float | None = None, recurrence: RecurrenceReport | None = None,
                    graph: ActionGraph | None = None) -> VClassReport:
    """Classes of mutual ``eps_V``-cheap reachability and their comparison with flow classes.

    A node is recurrent when it lies on a cycle of the thresholded graph; classes
    are the strong components with a cycle, ordered by their smallest node.  The
    class order is reachability in the thresholded graph, and quasiattractors
    are its sinks.  With ``recurrence`` given, interior flow classes are paired
    with V-classes whose point sets come within one grid cell of each other.
    """
    if eps_V <= 0:
        raise ValueError("eps_V must be positive")
    from .flow import _hasse, recurrence_classes

    g = graph if graph is not None else action_graph(model, box, grid_step, times, ring, alpha)
    A = zero_cost_graph(g, eps_V)
    classes, reach = recurrence_classes(A)
    quasi = [not np.any(reach[i]) for i in range(len(classes))]
    report = VClassReport(g.nodes, classes, quasi, _hasse(reach), eps_V)
    if recurrence is not None:
        tol = max(grid_step, float(recurrence.params.get("grid_step", 0.0))) * (1 + 1e-9)
        ap = recurrence.interior_classes
        used_ap = set()
        for k in range(len(classes)):
            best, best_d = None, np.inf
            for j in ap:
                dist = _set_distance(report.points(k), recurrence.points(j))
                if dist < best_d:
                    best, best_d = j, dist
            if best is not None and best_d <= tol:
                report.matches.append({"v_class": k, "ap_class": int(best), "distance": best_d,
                                       "same_role": bool(quasi[k]) == bool(recurrence.quasiattractor[best])})
                used_ap.add(best)
            else:
                report.unmatched_v.append(k)
        report.unmatched_ap = [int(j) for j in ap if j not in used_ap]
    return report


# ---------------------------------------------------------------------------
# local path improvement


def golden_section(f, a: float, b: float, tol: float = 1e-6, max_iter: int = 200):
    """Minimise a unimodal scalar function on ``[a, b]``; returns ``(x, f(x))``."""
    invphi = (math.sqrt(5) - 1) / 2
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if abs(b - a) < tol:
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return (c, fc) if fc < fd else (d, fd)


def path_refine(model: ModelSpec, path: PiecewisePath, iterations: int = 10, quad_points: int = 4,
                tol: float = 1e-8) -> PiecewisePath:
    """Coordinate descent on interior breakpoints and durations; never increases the action.

    Each scalar is moved by golden-section search over a bracket scaled to
    the neighbouring segments; a move is kept only when it lowers the action.
    Breakpoints are kept off the ``path.alpha`` collar.
    """
    pts = path.breakpoints.copy()
    dur = path.durations.copy()
    alpha = path.alpha

    def total(p, t):
        return action(model, PiecewisePath(p, t, alpha=-np.inf), quad_points)

    best = total(pts, dur)
    if not np.isfinite(best):
        raise ValueError("path_refine needs a path of finite action")
    floor = alpha + 1e-9 if alpha > 0 else 1e-9
    for _ in range(iterations):
        start = best
        for k in range(1, len(pts) - 1):
            span = max(np.linalg.norm(pts[k] - pts[k - 1]), np.linalg.norm(pts[k + 1] - pts[k]), 1e-6)
            for i in range(pts.shape[1]):
                x0 = pts[k, i]
                lo, hi = max(floor, x0 - span), x0 + span

                def f(v, k=k, i=i):
                    trial = pts.copy()
                    trial[k, i] = v
                    return total(trial, dur)

                x, fx = golden_section(f, lo, hi, tol=1e-7 * max(1.0, span))
                if fx < best:
                    pts[k, i] = x
                    best = fx
        for k in range(len(dur)):
            t0 = dur[k]

            def g(logt, k=k):
                trial = dur.copy()
                trial[k] = math.exp(logt)
                return total(pts, trial)

            lt, ft = golden_section(g, math.log(t0) - math.log(4.0), math.log(t0) + math.log(4.0), tol=1e-7)
            if ft < best:
                dur[k] = math.exp(lt)
                best = ft
        if start - best <= tol * max(1.0, abs(start)):
            break
    return PiecewisePath(pts, dur, alpha=alpha)
