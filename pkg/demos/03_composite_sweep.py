"""Stiff bars in a soft matrix: arithmetic averages stall, adaptive ones do not.

Run:  python demos/03_composite_sweep.py        (about half a minute)
"""

import math

from adaptive_bddc.cli import ExperimentSpec, emit_table, run_experiment
from adaptive_bddc.fem import Material, composite_bar_boxes, cube_problem
from adaptive_bddc.solver import PcgConfig

counts, h = (2, 2, 2), 4
materials = {0: Material(young=1e6, poisson=0.45), 1: Material(young=2.1e11, poisson=0.3)}
problem = cube_problem(counts, h, "elasticity", materials=materials,
                       dirichlet=[("zmin", None)], loads=[("zmax", None)],
                       bars=[(b, 1) for b in composite_bar_boxes(counts, h)])
print(f"bar elements: {int((problem.mesh.material == 1).sum())} of {len(problem.mesh.elements)}")

spec = ExperimentSpec(problem, ("c", "c+e", "c+e+f", "c+e+f-3eigv", "adaptive"),
                      (math.inf, 1000.0, 100.0, 10.0), PcgConfig(max_iterations=2000))
rows = run_experiment(spec)
print(emit_table(rows, "markdown", with_times=False))

# omega is the indicator before enrichment; the iterations follow tau down.
