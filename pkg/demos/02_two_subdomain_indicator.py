"""With two subdomains the pair eigenvalue is the condition number, not just a bound.

Run:  python demos/02_two_subdomain_indicator.py
"""

import numpy as np

from adaptive_bddc.adaptive import adaptive_enrich, build_pair, solve_pair_eigenproblem
from adaptive_bddc.constraints import ConstraintSet, assemble_stabilized
from adaptive_bddc.fem import cube_problem
from adaptive_bddc.solver import InterfaceProblem, solve
from adaptive_bddc.substructuring import substructure

ss = substructure(cube_problem((1, 1, 2), 4, "elasticity", dirichlet=[("zmin", None)],
                               loads=[("zmax", None)]))

pair = build_pair(ss, ConstraintSet(), 0, 1)
res = solve_pair_eigenproblem(pair)
print("leading pair eigenvalues:", np.round(res.eigenvalues[:6], 4))

# Dense check: form the preconditioned operator column by column.
ip = InterfaceProblem(ss)
op = assemble_stabilized(ss, ConstraintSet())
mat = np.column_stack([op(e) for e in np.eye(ip.n)])
lam = np.sort(np.linalg.eigvals(mat @ ip.dense()).real)
print(f"largest eigenvalue of M S   {lam[-1]:.10f}")
print(f"pair indicator omega        {res.omega:.10f}")
print(f"PCG Lanczos estimate        {solve(ss, op)[1].kappa:.10f}")

# Ask for kappa <= 2: the pair problem says how many averages that costs.
en = adaptive_enrich(ss, ConstraintSet(), 2.0, max_vectors=None)
_, rep = solve(ss, assemble_stabilized(ss, en.constraints))
print(f"tau = 2: {en.constraints.n_rows(ss.globs)} adaptive rows, kappa {rep.kappa:.4f}")
