import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from adaptive_bddc.adaptive import adaptive_enrich, build_pair, solve_pair_eigenproblem
from adaptive_bddc.constraints import ConstraintSet, arithmetic_constraints, assemble_stabilized
from adaptive_bddc.fem import cube_problem
from adaptive_bddc.solver import (InterfaceProblem, MaxIterationsExceeded, PcgConfig,
                                  lanczos_condition_estimate, pcg, reduce_to_interface, solve)
from adaptive_bddc.substructuring import substructure
from oracles import dense_schur, global_direct_solution, textbook_cg

from conftest import modes


def test_config_validation():
    with pytest.raises(ValueError):
        PcgConfig(tol=0.0)
    with pytest.raises(ValueError):
        PcgConfig(criterion="energy")


def _spd(rng, n, cond=100.0):
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return q @ np.diag(np.linspace(1.0, cond, n)) @ q.T


def test_exact_preconditioner_one_iteration(rng):
    a = _spd(rng, 12)
    inv = np.linalg.inv(a)
    b = rng.standard_normal(12)
    x, rep = pcg(lambda v: a @ v, lambda r: inv @ r, b)
    assert rep.iterations == 1
    assert rep.kappa == 1.0
    assert_allclose(x, np.linalg.solve(a, b))


def test_identity_preconditioner_matches_textbook_cg(rng):
    a = _spd(rng, 15)
    b = rng.standard_normal(15)
    trail = []
    x, rep = pcg(lambda v: a @ v, lambda r: r, b, PcgConfig(tol=1e-12),
                 callback=lambda it, res: trail.append(res))
    ref = textbook_cg(a, b, rep.iterations)
    assert_allclose(x, ref[-1], atol=1e-10)
    assert len(trail) == rep.iterations


def test_lanczos_diagonal_spectrum():
    d = np.arange(1.0, 11.0)
    b = np.ones(10)
    _, rep = pcg(lambda v: d * v, lambda r: r, b, PcgConfig(tol=1e-14))
    assert rep.iterations == 10
    assert abs(rep.kappa - 10.0) <= 1e-6


def test_lanczos_single_step():
    assert lanczos_condition_estimate([0.5], []) == 1.0


def test_max_iterations(rng):
    a = _spd(rng, 30, cond=1e6)
    b = rng.standard_normal(30)
    with pytest.raises(MaxIterationsExceeded) as exc:
        pcg(lambda v: a @ v, lambda r: r, b, PcgConfig(max_iterations=3))
    assert exc.value.report.iterations == 3
    assert not exc.value.report.converged


def test_zero_rhs():
    x, rep = pcg(lambda v: v, lambda r: r, np.zeros(4))
    assert rep.iterations == 0 and np.all(x == 0)


@settings(max_examples=20, deadline=None)
@given(n=st.integers(2, 25), seed=st.integers(0, 10_000))
def test_kappa_bounded_by_spectrum(n, seed):
    rng = np.random.default_rng(seed)
    a = _spd(rng, n, cond=50.0)
    b = rng.standard_normal(n)
    _, rep = pcg(lambda v: a @ v, lambda r: r, b, PcgConfig(tol=1e-10))
    assert 1.0 <= rep.kappa <= 50.0 * (1 + 1e-8)


def test_preconditioned_criterion(cube_ss):
    op = assemble_stabilized(cube_ss, arithmetic_constraints(cube_ss, "edges"))
    _, r1 = solve(cube_ss, op)
    _, r2 = solve(cube_ss, op, PcgConfig(criterion="preconditioned"))
    assert r1.converged and r2.converged
    assert abs(r1.iterations - r2.iterations) <= 3


def test_iteration_log(cube_ss, caplog):
    op = assemble_stabilized(cube_ss, ConstraintSet())
    with caplog.at_level(logging.DEBUG, logger="adaptive_bddc.solver"):
        _, rep = solve(cube_ss, op)
    lines = [json.loads(r.message) for r in caplog.records if r.name == "adaptive_bddc.solver"]
    assert [l["iteration"] for l in lines] == list(range(1, rep.iterations + 1))
    assert lines[-1]["residual"] <= 1e-8


def test_single_subdomain_direct():
    ss = substructure(cube_problem((1, 1, 1), 3, "elasticity"))
    ip = reduce_to_interface(ss)
    assert ip.n == 0
    u, rep = solve(ss, assemble_stabilized(ss, ConstraintSet()))
    ref, free = global_direct_solution(ss.problem)
    assert rep.iterations == 0
    assert_allclose(u, ref[free], rtol=1e-10, atol=1e-14)


def test_schur_operator_against_dense(bar_scalar_ss):
    ss = bar_scalar_ss
    ip = InterfaceProblem(ss)
    a = np.zeros((ss.maps.n_u, ss.maps.n_u))
    for s in ss.systems:
        u_idx = ss.maps.w_to_u[ss.maps.offsets[s.index]:ss.maps.offsets[s.index + 1]]
        a[np.ix_(u_idx, u_idx)] += s.A.toarray()
    iface = ss.maps.interface_u
    interior = np.setdiff1d(np.arange(ss.maps.n_u), iface)
    expected = dense_schur(a, interior, iface)
    assert_allclose(ip.dense(), expected, atol=1e-10 * np.abs(expected).max())
    x = np.random.default_rng(3).standard_normal(ip.n)
    assert_allclose(ip.apply(x), expected @ x, atol=1e-10 * np.abs(expected).max() * np.abs(x).sum())


def _check_against_direct(ss, op, tol=1e-6):
    u, rep = solve(ss, op)
    ref, free = global_direct_solution(ss.problem)
    assert rep.converged
    assert np.linalg.norm(u - ref[free]) <= tol * np.linalg.norm(ref[free])
    # true residual backstop on the assembled system
    r = np.zeros(ss.maps.n_u)
    f = np.zeros(ss.maps.n_u)
    w = ss.maps.R @ u
    for i, s in enumerate(ss.systems):
        u_idx = ss.maps.w_to_u[ss.maps.offsets[i]:ss.maps.offsets[i + 1]]
        np.add.at(r, u_idx, s.A @ ss.maps.local(w, i) - s.f)
        np.add.at(f, u_idx, s.f)
    assert np.linalg.norm(r) <= 10 * 1e-8 * np.linalg.norm(f)
    return rep


@pytest.mark.parametrize("mode", ["c", "c+e", "c+e+f"])
def test_solution_matches_direct(cube_ss, mode):
    _check_against_direct(cube_ss, assemble_stabilized(cube_ss, modes(cube_ss)[mode]))


def test_solution_matches_direct_scalar(scalar_cube_ss):
    _check_against_direct(scalar_cube_ss, assemble_stabilized(scalar_cube_ss, ConstraintSet()))


def test_preconditioned_spectrum_bounded_below(cube_ss):
    ss = cube_ss
    ip = InterfaceProblem(ss)
    assert ip.n <= 600
    s = ip.dense()
    op = assemble_stabilized(ss, arithmetic_constraints(ss, "edges"))
    m = np.column_stack([op(e) for e in np.eye(ip.n)])
    assert_allclose(m, m.T, atol=1e-9 * np.abs(m).max())
    lam = np.linalg.eigvals(m @ s).real
    assert lam.min() >= 1 - 1e-8


def test_two_subdomain_kappa_below_indicator(bar_elastic_ss):
    ss = bar_elastic_ss
    pair = build_pair(ss, ConstraintSet(), 0, 1)
    omega = solve_pair_eigenproblem(pair).omega
    _, rep = solve(ss, assemble_stabilized(ss, ConstraintSet()))
    assert rep.kappa <= omega * 1.05


def test_kappa_monotone_in_tau(cube_ss):
    base = arithmetic_constraints(cube_ss, "edges")
    kappas = []
    for tau in (np.inf, 10.0, 5.0, 2.0):
        en = adaptive_enrich(cube_ss, base, tau)
        _, rep = solve(cube_ss, assemble_stabilized(cube_ss, en.constraints))
        kappas.append(rep.kappa)
    assert all(b <= a * (1 + 1e-6) for a, b in zip(kappas, kappas[1:]))
