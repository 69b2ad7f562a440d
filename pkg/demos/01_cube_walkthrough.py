"""Walk through one BDDC setup on the 2x2x2 elastic cube, piece by piece.

Run:  python demos/01_cube_walkthrough.py
"""

import numpy as np

from adaptive_bddc.constraints import arithmetic_constraints, assemble_stabilized
from adaptive_bddc.fem import cube_problem
from adaptive_bddc.solver import solve
from adaptive_bddc.substructuring import substructure

# A unit cube cut into 8 subdomains of 4x4x4 trilinear elements, clamped at x = 0.
problem = cube_problem((2, 2, 2), 4, "elasticity")
ss = substructure(problem)
print(f"{problem.mesh.n_dofs} dofs, {ss.mesh.n_dofs - int(problem.fixed_dofs().sum())} free")

# Interface nodes are grouped by the set of subdomains sharing them.
print(ss.globs.summary())

# Corner dofs are shared outright; everything else on the interface is duplicated.
m = ss.maps
print(f"W (all copies) {m.n_w}, Wc (corners shared) {m.n_wc}, U (assembled) {m.n_u}")

# Averages over edges, then over edges and faces, tighten the coarse space.
for which in ("none", "edges", "edges+faces"):
    cs = arithmetic_constraints(ss, which)
    op = assemble_stabilized(ss, cs)
    u, rep = solve(ss, op)
    print(f"{which:>12}: Nc={cs.n_rows(ss.globs):3d}  it={rep.iterations:3d}  "
          f"kappa={rep.kappa:7.3f}  nnz(A~)={op.A_tilde.nnz}")

# The tip displacement does not depend on the preconditioner.
tip = problem.mesh.face_nodes("xmax")
uz = np.zeros(problem.mesh.n_dofs)
uz[~problem.fixed_dofs()] = u
print(f"mean vertical tip displacement {uz[3 * tip + 2].mean():.6e}")
