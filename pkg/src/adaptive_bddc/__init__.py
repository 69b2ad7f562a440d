"""BDDC with adaptive coarse-space selection for structured 3D problems.

Typical use::

    from adaptive_bddc import cube_problem, substructure, arithmetic_constraints
    from adaptive_bddc import adaptive_enrich, assemble_stabilized, solve

    problem = cube_problem((2, 2, 2), 4, "elasticity")
    ss = substructure(problem)
    enriched = adaptive_enrich(ss, arithmetic_constraints(ss, "edges"), tau=10.0)
    u, report = solve(ss, assemble_stabilized(ss, enriched.constraints))
"""

from .adaptive import (AdaptiveConstraintRows, Enrichment, NotAdjacent, PairEigenResult,
                       SubdomainPair, adaptive_enrich, build_pair, extract_constraints,
                       indicator, solve_pair_eigenproblem)
from .constraints import (BddcOperator, ConstraintSet, RankDeficientAverages, SingularGram,
                          apply_preconditioner, arithmetic_constraints, assemble_stabilized,
                          build_projection, change_of_variables, glob_transform)
from .fem import (Material, Problem, build_cube_mesh, composite_bar_boxes, cube_problem,
                  read_problem)
from .linalg import (Factorization, NotPositiveDefinite, NullspaceInclusionViolated,
                     generalized_eig_sym, pivoted_qr)
from .solver import MaxIterationsExceeded, PcgConfig, PcgReport, pcg, solve
from .substructuring import (CornerSelectionFailed, classify_globs, select_corners,
                             substructure)

__version__ = "0.1.0"
