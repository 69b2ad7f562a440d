"""Interface (Schur complement) problem, PCG and the Lanczos condition estimate."""

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigvalsh_tridiagonal

log = logging.getLogger(__name__)


class MaxIterationsExceeded(RuntimeError):
    def __init__(self, report):
        super().__init__(f"PCG did not converge in {report.iterations} iterations "
                         f"(relative residual {report.residuals[-1]:.3e})")
        self.report = report


@dataclass
class PcgConfig:
    tol: float = 1e-8
    max_iterations: int = 1000
    estimate_condition: bool = True
    criterion: str = "residual"     # or "preconditioned"

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tolerance must be positive")
        if self.criterion not in ("residual", "preconditioned"):
            raise ValueError(f"unknown stopping criterion {self.criterion!r}")


@dataclass
class PcgReport:
    iterations: int
    kappa: float | None
    residuals: list
    converged: bool
    alphas: list = field(default_factory=list, repr=False)
    betas: list = field(default_factory=list, repr=False)


def lanczos_matrix(alphas, betas):
    """Diagonal and off-diagonal of the Lanczos tridiagonal matrix from CG coefficients."""
    a = np.asarray(alphas, dtype=float)
    b = np.asarray(betas, dtype=float)[:len(a) - 1]
    diag = 1.0 / a
    diag[1:] += b / a[:-1]
    off = np.sqrt(b) / a[:-1]
    return diag, off


def lanczos_condition_estimate(alphas, betas):
    """``lam_max / lam_min`` of the tridiagonal matrix built from PCG coefficients."""
    if len(alphas) < 2:
        return 1.0
    diag, off = lanczos_matrix(alphas, betas)
    ev = eigvalsh_tridiagonal(diag, off)
    return float(ev[-1] / ev[0])


def pcg(apply_a, apply_m, b, config=None, callback=None):
    """Preconditioned conjugate gradients from a zero initial guess.

    Stops when ``||r_k|| / ||b|| <= tol`` (or the preconditioned analogue
    ``sqrt(r_k.z_k / r_0.z_0)`` with ``criterion="preconditioned"``). Raises
    :class:`MaxIterationsExceeded` carrying the report when the iteration
    limit is reached.
    """
    config = config or PcgConfig()
    b = np.asarray(b, dtype=float)
    x = np.zeros_like(b)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return x, PcgReport(0, 1.0, [0.0], True)
    r = b.copy()
    z = apply_m(r)
    rz = r @ z
    rz0 = rz
    p = z.copy()
    alphas, betas, history = [], [], [1.0]
    converged = False
    it = 0
    while it < config.max_iterations:
        q = apply_a(p)
        alpha = rz / (p @ q)
        x += alpha * p
        r -= alpha * q
        it += 1
        alphas.append(alpha)
        z = apply_m(r)
        rz_new = r @ z
        if config.criterion == "residual":
            res = np.linalg.norm(r) / bnorm
        else:
            res = np.sqrt(abs(rz_new) / rz0)
        history.append(res)
        if callback is not None:
            callback(it, res)
        if log.isEnabledFor(logging.DEBUG):
            kappa = lanczos_condition_estimate(alphas, betas) if config.estimate_condition else None
            log.debug(json.dumps({"iteration": it, "residual": res, "kappa": kappa}))
        if res <= config.tol:
            converged = True
            break
        beta = rz_new / rz
        betas.append(beta)
        rz = rz_new
        p = z + beta * p
    kappa = lanczos_condition_estimate(alphas, betas) if config.estimate_condition else None
    report = PcgReport(it, kappa, history, converged, alphas, betas)
    if not converged:
        raise MaxIterationsExceeded(report)
    return x, report


class InterfaceProblem:
    """Schur complement system on the interface dofs ``maps.interface_u``.

    The operator assembles ``S_i = A_GG - A_GI A_II^{-1} A_IG`` action-wise
    from per-subdomain interior solves.
    """

    def __init__(self, ss):
        self.ss = ss
        maps = ss.maps
        self.iface = maps.interface_u
        self.n = len(self.iface)
        self._pos = np.full(maps.n_u, -1, dtype=np.int64)
        self._pos[self.iface] = np.arange(self.n)
        self._local = [self._pos[maps.w_to_u[maps.offsets[s.index] + s.interface]] for s in ss.systems]
        rhs = np.zeros(self.n)
        for s, loc in zip(ss.systems, self._local):
            g = s.f[s.interface] - ss.extension.blocks[s.index][2].T @ ss.extension.interior_solve(
                s.index, s.f[s.interior])
            np.add.at(rhs, loc, g)
        self.rhs = rhs

    def apply(self, x):
        y = np.zeros(self.n)
        for s, loc in zip(self.ss.systems, self._local):
            if len(loc):
                np.add.at(y, loc, self.ss.extension.schur_apply(s.index, x[loc]))
        return y

    def dense(self):
        out = np.zeros((self.n, self.n))
        for s, loc in zip(self.ss.systems, self._local):
            if len(loc):
                out[np.ix_(loc, loc)] += self.ss.extension.schur_dense(s.index)
        return out

    def recover(self, x):
        """Full solution in U from interface values (independent Dirichlet solves)."""
        ss = self.ss
        maps = ss.maps
        u = np.zeros(maps.n_u)
        u[self.iface] = x
        for s, loc in zip(ss.systems, self._local):
            _, _, aig, _ = ss.extension.blocks[s.index]
            ui = ss.extension.interior_solve(s.index, s.f[s.interior] - aig @ x[loc])
            u[maps.w_to_u[maps.offsets[s.index] + s.interior]] = ui
        return u


def reduce_to_interface(ss):
    return InterfaceProblem(ss)


def solve(ss, op, config=None, callback=None):
    """Reduce, iterate with the BDDC preconditioner, and recover the interiors."""
    problem = InterfaceProblem(ss)
    if problem.n == 0:
        return problem.recover(np.zeros(0)), PcgReport(0, 1.0, [0.0], True)
    x, report = pcg(problem.apply, op, problem.rhs, config, callback)
    return problem.recover(x), report
