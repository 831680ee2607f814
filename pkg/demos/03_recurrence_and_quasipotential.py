"""Two views of the same long-run structure in a bistable 2-d model.

The flow view links grid cells by short flow segments plus small jumps and
groups mutually reachable cells.  The large-deviation view links cells whose
transition costs almost nothing.  Both should find the two attracting
equilibria and the saddle between them, with the saddle draining into both.
The script then prices an escape from one basin with the quasipotential.
"""
import numpy as np

from bpqsd import flow, ldp, model as mdl

bi = mdl.shipped_bistable_2d()
box = [(0.0, 4.0), (0.0, 2.0)]

rec = flow.chain_recurrence(bi, box, 0.05, 0.06, T=2.0)
print("flow classes (interior):")
for k in rec.interior_classes:
    role = "quasiattractor" if k in rec.quasiattractors else "transient"
    print(f"  class {k}: centre {np.round(rec.points(k).mean(axis=0), 2)}  {role}")

rep = ldp.v_chain_classes(bi, box, 0.05, 2e-3, recurrence=rec)
print("\nzero-cost classes:")
for k in range(len(rep.classes)):
    role = "sink" if k in rep.quasiattractors else "transient"
    print(f"  class {k}: centre {np.round(rep.points(k).mean(axis=0), 2)}  {role}")
print(f"ordering edges {rep.dag_edges}; all matched to flow classes: "
      f"{all(m['same_role'] for m in rep.matches) and not rep.unmatched_ap}")

field = ldp.quasipotential_field(bi, box, 0.05, [1.0, 1.0])
print("\ncost of reaching a point starting from (1, 1):")
for y in ([1.5, 1.0], [2.0, 1.0], [3.0, 1.0], [1.0, 1.5]):
    print(f"  {y}: {field.value_at(y):.4f}")
print("Past the saddle at (2, 1) the cost stops growing: the flow carries the path on to (3, 1).")

# A crooked path between two points, straightened by local search.
rng = np.random.default_rng(0)
pts = np.linspace([0.9, 0.9], [1.2, 1.1], 6)
pts[1:-1] += rng.normal(scale=0.08, size=(4, 2))
path = ldp.PiecewisePath(pts, np.full(5, 0.4), alpha=0.1)
better = ldp.path_refine(bi, path, iterations=5)
print(f"\npath action before {ldp.action(bi, path):.4f}, after refinement {ldp.action(bi, better):.4f}")
