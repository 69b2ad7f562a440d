import warnings

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from adaptive_bddc.constraints import (ConstraintSet, RankDeficientAverages, SingularGram,
                                       apply_preconditioner, arithmetic_constraints,
                                       assemble_stabilized, build_projection,
                                       change_of_variables, glob_transform, independent_rows)
from adaptive_bddc.fem import cube_problem
from adaptive_bddc.substructuring import substructure
from oracles import (dense_projector, exact_rank, saddle_point_solve, unit_average_transform)

from conftest import continuous_copies, modes


def test_cube_edge_rows(cube_ss):
    cs = arithmetic_constraints(cube_ss, "edges")
    assert cs.n_rows(cube_ss.globs) == 54
    assert cs.count_by_provenance(cube_ss.globs) == {"arithmetic": 54}
    assert arithmetic_constraints(cube_ss, "edges+faces").n_rows(cube_ss.globs) == 54 + 36
    assert arithmetic_constraints(cube_ss, "none").n_rows(cube_ss.globs) == 0


def test_scalar_face_row(bar_scalar_ss):
    cs = arithmetic_constraints(bar_scalar_ss, "faces")
    assert cs.n_rows(bar_scalar_ss.globs) == 1


def test_arithmetic_rows_compatible(cube_ss, rng):
    d = arithmetic_constraints(cube_ss, "edges+faces").matrix(cube_ss, "w")
    w = continuous_copies(cube_ss, rng, 20)
    assert np.abs(d @ w).max() <= 1e-10


def test_rows_supported_on_one_glob(cube_ss):
    cs = arithmetic_constraints(cube_ss, "edges+faces")
    d = cs.matrix(cube_ss, "w").tocsr()
    node_glob = {}
    for k, g in enumerate(cube_ss.globs.globs):
        for n in g.nodes:
            node_glob[n] = k
    for r in range(d.shape[0]):
        nodes = cube_ss.maps.w_dof[d.indices[d.indptr[r]:d.indptr[r + 1]]] // 3
        assert len({node_glob[n] for n in nodes}) == 1


def test_unit_average_transform_exact():
    for n in (1, 2, 4, 9):
        tr = glob_transform(np.ones((1, n)))
        assert np.array_equal(tr.T, unit_average_transform(n))
        assert_allclose(tr.H @ tr.T, np.eye(n), atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(n=st.integers(2, 12), m=st.integers(1, 4), seed=st.integers(0, 2**31))
def test_transform_inverse(n, m, seed):
    h = np.random.default_rng(seed).standard_normal((min(m, n), n))
    tr = glob_transform(h)
    assert_allclose(tr.H @ tr.T, np.eye(n), atol=1e-12)
    assert_allclose(tr.T @ tr.H, np.eye(n), atol=1e-12)


def test_transform_makes_averages_explicit(rng):
    h = rng.standard_normal((2, 6))
    tr = glob_transform(h)
    x = rng.standard_normal(6)
    xbar = tr.H @ x
    # H maps to new variables: the explicit slots carry (up to the QR factor) the averages
    q = np.linalg.qr(h[:, tr.perm], mode="complete")[0]
    assert_allclose(np.abs(q.T @ (h @ x)), np.abs(xbar[tr.explicit]), rtol=1e-10)


def test_proportional_rows_dropped():
    h = np.array([[1.0, 2.0, 3.0], [2.0, 4.0, 6.0]])
    assert exact_rank(h) == 1
    with pytest.warns(RankDeficientAverages):
        tr = glob_transform(h)
    assert tr.rank == 1
    assert_allclose(independent_rows(h), [0])


def test_no_constraints_identity_transform(cube_ss):
    cov, tc = change_of_variables(ConstraintSet(), cube_ss)
    assert abs(cov.T - sp.identity(cube_ss.maps.n_w)).max() == 0
    assert tc.n_rows == 0


def test_transformed_rows_and_blocks(cube_ss):
    cs = arithmetic_constraints(cube_ss, "edges+faces")
    cov, tc = change_of_variables(cs, cube_ss)
    dbar = tc.matrix.toarray()
    assert dbar.shape == (90, cube_ss.maps.n_wc)
    assert np.all((dbar == 1).sum(axis=1) == 1) and np.all((dbar == -1).sum(axis=1) == 1)
    # T_i H_i = H_i T_i = I per glob block, and T touches only constrained globs
    for tr in cov.transforms.values():
        assert_allclose(tr.T @ tr.H, np.eye(len(tr.dofs)), atol=1e-12)
    touched = np.flatnonzero(abs(cov.T - sp.identity(cube_ss.maps.n_w)).sum(axis=1))
    on_globs = set(np.concatenate([cube_ss.glob_dofs(k) for k in cs.entries]).tolist())
    assert set(cube_ss.maps.w_dof[touched].tolist()) <= on_globs


def test_transformed_constraints_equal_original(cube_ss, rng):
    # D^c T and D̄^c have the same null space on Wc
    cs = arithmetic_constraints(cube_ss, "edges")
    cov, tc = change_of_variables(cs, cube_ss)
    maps = cube_ss.maps
    dc = cs.matrix(cube_ss, "w")
    wbar = rng.standard_normal(maps.n_wc)
    nullproj = build_projection(tc.matrix, maps.n_wc) @ wbar
    w = cov.T @ (maps.Rc @ nullproj)
    assert np.abs(dc @ w).max() <= 1e-10 * np.abs(w).max()


def test_projection_trivial_cases():
    assert abs(build_projection(sp.csr_matrix((0, 4)), 4) - sp.identity(4)).max() == 0
    d = sp.csr_matrix(([1.0, -1.0], ([0, 0], [1, 3])), shape=(1, 4))
    p = build_projection(d).toarray()
    assert_allclose(p[np.ix_([1, 3], [1, 3])], [[0.5, 0.5], [0.5, 0.5]])
    assert_allclose(p[0, 0], 1.0)


def test_projection_random(rng):
    n = 40
    plus = rng.choice(n, 10, replace=False)
    rest = np.setdiff1d(np.arange(n), plus)
    minus = rng.choice(rest, 10, replace=False)
    d = sp.csr_matrix((np.r_[np.ones(10), -np.ones(10)],
                       (np.r_[np.arange(10), np.arange(10)], np.r_[plus, minus])), shape=(10, n))
    p = build_projection(d).toarray()
    assert_allclose(p, dense_projector(d.toarray()), atol=1e-12)
    assert_allclose(p @ p, p, atol=1e-12)
    assert_allclose(p, p.T, atol=1e-12)
    assert_allclose(p @ d.toarray().T, 0.0, atol=1e-12)


def test_projection_general_rows(rng):
    d = sp.csr_matrix(rng.standard_normal((3, 8)))
    assert_allclose(build_projection(d).toarray(), dense_projector(d.toarray()), atol=1e-12)


def test_duplicate_rows_singular():
    d = sp.csr_matrix(np.array([[1.0, -1.0, 0.0], [1.0, -1.0, 0.0]]))
    with pytest.raises(SingularGram):
        build_projection(d)


def test_no_constraints_atilde_is_corner_operator(cube_ss):
    op = assemble_stabilized(cube_ss, ConstraintSet())
    assert abs(op.A_tilde - cube_ss.corner_operator()).max() <= 1e-12 * op.t


def test_cube_atilde_size_and_sparsity():
    ss = substructure(cube_problem((2, 2, 2), 4, "elasticity", dirichlet=()))
    cs = arithmetic_constraints(ss, "edges")
    with_cov = assemble_stabilized(ss, cs, factorize=False)
    without = assemble_stabilized(ss, cs, transform=False, factorize=False)
    assert with_cov.A_tilde.shape == (2925, 2925)
    assert with_cov.A_tilde.nnz < without.A_tilde.nnz


def test_default_t_is_max_corner_diagonal(cube_ss):
    op = assemble_stabilized(cube_ss, arithmetic_constraints(cube_ss, "edges"))
    assert op.t == cube_ss.corner_operator().diagonal().max()


def test_bad_t(cube_ss):
    with pytest.raises(ValueError):
        assemble_stabilized(cube_ss, ConstraintSet(), t=0.0)


def _tc_matrix(ss, op):
    """Wc-level change of variables: T Rc = Rc Tc (corners are never transformed)."""
    rc = ss.maps.Rc
    mult = np.asarray(rc.sum(axis=0)).ravel()
    return sp.diags(1.0 / mult) @ (rc.T @ op.T @ rc)


@pytest.mark.parametrize("t", [None, 1.0, 1e6])
@pytest.mark.parametrize("mode", ["c", "c+e", "c+e+f"])
def test_stabilized_matches_saddle_point(small_cube_ss, rng, mode, t):
    ss = small_cube_ss
    cs = modes(ss)[mode]
    op = assemble_stabilized(ss, cs, t=t)
    r = np.zeros(ss.maps.n_u)
    r[ss.maps.interface_u] = rng.standard_normal(len(ss.maps.interface_u))
    wbar = op.solve_coarse(r)
    rhs = ss.maps.Rc.T @ (op.T.T @ ss.averaging.apply_transpose(r))
    ref = saddle_point_solve(op.projected.toarray(), op.tc.matrix.toarray(), rhs)
    assert_allclose(wbar, ref, atol=1e-9 * np.abs(ref).max())
    # same coarse solution in original variables, from the untransformed saddle point
    ac = ss.corner_operator().toarray()
    wc = saddle_point_solve(ac, cs.filtered().matrix(ss, "wc").toarray(),
                            ss.maps.Rc.T @ ss.averaging.apply_transpose(r))
    assert_allclose(_tc_matrix(ss, op) @ wbar, wc, atol=1e-9 * np.abs(wc).max())


def test_preconditioner_against_constrained_minimization(bar_scalar_ss, rng):
    ss = bar_scalar_ss
    maps = ss.maps
    cs = arithmetic_constraints(ss, "faces")
    op = assemble_stabilized(ss, cs)
    r = rng.standard_normal(len(maps.interface_u))
    got = apply_preconditioner(op, r)
    # oracle: minimize 1/2 <Aw,w> - <E^T r, w> over W subject to corner equality and
    # equal face averages, assembled from scratch
    a = sp.block_diag([s.A for s in ss.systems]).toarray()
    rows = []
    for dof in maps.corner_dofs:
        copies = np.flatnonzero(maps.w_dof == dof)
        for p, q in zip(copies[:-1], copies[1:]):
            row = np.zeros(maps.n_w)
            row[p], row[q] = 1.0, -1.0
            rows.append(row)
    face = ss.globs.faces[0]
    row = np.zeros(maps.n_w)
    for n in face.nodes:
        for s, sign in ((0, 1.0), (1, -1.0)):
            row[np.flatnonzero((maps.w_dof == n) & (maps.w_sub == s))] = sign
    rows.append(row)
    r_u = np.zeros(maps.n_u)
    r_u[maps.interface_u] = r
    w = saddle_point_solve(a, np.array(rows), ss.averaging.apply_transpose(r_u))
    expected = ss.averaging.apply(w)[maps.interface_u]
    assert_allclose(got, expected, atol=1e-10 * np.abs(expected).max())


def test_preconditioner_output_is_harmonic(cube_ss, rng):
    ss = cube_ss
    op = assemble_stabilized(ss, arithmetic_constraints(ss, "edges"))
    r_u = np.zeros(ss.maps.n_u)
    r_u[ss.maps.interface_u] = rng.standard_normal(len(ss.maps.interface_u))
    u = op.apply_u(r_u)
    w = ss.maps.R @ u
    for i, s in enumerate(ss.systems):
        res = s.A @ ss.maps.local(w, i)
        assert np.abs(res[s.interior]).max() <= 1e-9 * np.abs(s.A).max() * np.abs(u).max()


@pytest.mark.parametrize("mode", ["c", "c+e", "c+e+f"])
def test_preconditioner_symmetric(cube_ss, rng, mode):
    op = assemble_stabilized(cube_ss, modes(cube_ss)[mode])
    n = len(cube_ss.maps.interface_u)
    r1, r2 = rng.standard_normal(n), rng.standard_normal(n)
    a, b = op(r1) @ r2, r1 @ op(r2)
    assert abs(a - b) <= 1e-9 * max(abs(a), 1.0)


def test_compatibility_random_vectors(cube_ss, rng):
    d = arithmetic_constraints(cube_ss, "edges+faces").matrix(cube_ss, "w")
    w = continuous_copies(cube_ss, rng, 100)
    assert np.abs(d @ w).max() <= 1e-10


def test_transformed_compatibility(cube_ss, rng):
    # continuous vectors, expressed in new variables, satisfy D̄^c = 0
    cs = arithmetic_constraints(cube_ss, "edges+faces")
    cov, tc = change_of_variables(cs, cube_ss)
    maps = cube_ss.maps
    for u in rng.standard_normal((5, maps.n_u)):
        w = maps.R @ u
        wbar = sp.linalg.spsolve(cov.T.tocsc(), w)
        wc = np.zeros(maps.n_wc)
        wc[maps.w_to_wc] = wbar
        assert np.abs(tc.matrix @ wc).max() <= 1e-10 * np.abs(u).max()


def test_filter_and_merge(cube_ss):
    cs = arithmetic_constraints(cube_ss, "edges")
    doubled = cs.merged(cs)
    assert doubled.n_rows(cube_ss.globs) == 108
    assert doubled.filtered().n_rows(cube_ss.globs) == 54


def test_dump(cube_ss):
    cs = arithmetic_constraints(cube_ss, "edges")
    lines = cs.dump(cube_ss.globs).splitlines()
    assert len(lines) == 18
    glob, kind, prov = lines[0].split()[:3]
    assert kind == "edge" and prov == "arithmetic"


def test_rank_deficient_globs_warn(cube_ss):
    cs = arithmetic_constraints(cube_ss, "edges")
    k = next(iter(cs.entries))
    e = cs.entries[k]
    bad = ConstraintSet()
    bad.add(k, e.dofs, np.vstack([e.coefficients, 2 * e.coefficients[:1]]), "arithmetic")
    with pytest.warns(RankDeficientAverages):
        change_of_variables(bad, cube_ss)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assemble_stabilized(cube_ss, bad)
