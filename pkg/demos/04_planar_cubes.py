"""Four subdomains in a plane, H/h = 8, corner constraints only.

Run:  python demos/04_planar_cubes.py
"""

from adaptive_bddc.constraints import ConstraintSet, assemble_stabilized
from adaptive_bddc.fem import cube_problem
from adaptive_bddc.solver import PcgConfig, solve
from adaptive_bddc.substructuring import substructure

ss = substructure(cube_problem((2, 2, 1), 8, "elasticity", dirichlet=[("xmin", None)],
                               loads=[("xmax", None)]))
print(f"{ss.mesh.n_dofs} dofs; corners at z = "
      f"{sorted({float(ss.mesh.coords[n, 2]) for n in ss.globs.corner_nodes()})}")
op = assemble_stabilized(ss, ConstraintSet())
for criterion in ("residual", "preconditioned"):
    _, rep = solve(ss, op, PcgConfig(criterion=criterion))
    print(f"{criterion:>15} stopping: it {rep.iterations}, kappa {rep.kappa:.3f}")
