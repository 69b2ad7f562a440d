"""Glob constraints, the generalized change of variables and the BDDC operator.

Constraints are stored per glob as a set of weighted averages (functionals
over the glob's free dofs). Every subdomain sharing the glob sees the same
averages, and the constraint rows require each average to agree between the
copies of the glob: ``multiplicity - 1`` rows per average, chained over the
sorted sharing set.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .linalg import Factorization, QR_DROP_TOL, pivoted_qr
from .substructuring import block_operator


class SingularGram(np.linalg.LinAlgError):
    """``D D^T`` is singular: constraint rows are linearly dependent."""


class RankDeficientAverages(UserWarning):
    pass


@dataclass
class GlobConstraints:
    glob: int
    dofs: np.ndarray            # free global dofs of the glob
    coefficients: np.ndarray    # (n_averages, len(dofs))
    provenance: tuple           # "arithmetic" or "adaptive", one per row

    @property
    def n_averages(self):
        return self.coefficients.shape[0]


def independent_rows(h, tol=QR_DROP_TOL):
    """Indices of a maximal set of linearly independent rows, kept in order."""
    basis = []
    keep = []
    for k, row in enumerate(h):
        norm = np.linalg.norm(row)
        if norm == 0.0:
            continue
        res = row / norm
        for _ in range(2):
            for q in basis:
                res = res - (q @ res) * q
        rn = np.linalg.norm(res)
        if rn > tol:
            basis.append(res / rn)
            keep.append(k)
    return np.array(keep, dtype=np.int64)


class ConstraintSet:
    """Averages per glob, keyed by glob index."""

    def __init__(self, entries=None):
        self.entries = dict(entries or {})

    def copy(self):
        return ConstraintSet({k: GlobConstraints(e.glob, e.dofs, e.coefficients.copy(), e.provenance)
                              for k, e in self.entries.items()})

    def add(self, glob, dofs, rows, provenance):
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        if rows.size == 0:
            return
        prov = (provenance,) * len(rows) if isinstance(provenance, str) else tuple(provenance)
        if glob in self.entries:
            old = self.entries[glob]
            if not np.array_equal(old.dofs, dofs):
                raise ValueError(f"dof mismatch for glob {glob}")
            rows = np.vstack([old.coefficients, rows])
            prov = old.provenance + prov
        self.entries[glob] = GlobConstraints(glob, np.asarray(dofs), rows, prov)

    def merged(self, other):
        out = self.copy()
        for k, e in other.entries.items():
            out.add(k, e.dofs, e.coefficients, e.provenance)
        return out

    def filtered(self, tol=QR_DROP_TOL):
        """Drop numerically dependent averages glob by glob (earlier rows win)."""
        out = ConstraintSet()
        for k, e in sorted(self.entries.items()):
            keep = independent_rows(e.coefficients, tol)
            if len(keep):
                out.entries[k] = GlobConstraints(k, e.dofs, e.coefficients[keep],
                                                 tuple(e.provenance[i] for i in keep))
        return out

    def n_rows(self, globset):
        """Number of constraint rows (rows of D)."""
        return sum(e.n_averages * (globset.globs[k].multiplicity - 1) for k, e in self.entries.items())

    def count_by_provenance(self, globset):
        counts = {}
        for k, e in self.entries.items():
            m = globset.globs[k].multiplicity - 1
            for p in e.provenance:
                counts[p] = counts.get(p, 0) + m
        return counts

    def matrix(self, ss, space="wc"):
        """Constraint matrix D (rows x W) or D^c (rows x Wc) in original variables."""
        maps = ss.maps
        rows, cols, vals = [], [], []
        r = 0
        for k, e in sorted(self.entries.items()):
            subs = ss.globs.globs[k].subdomains
            idx = [maps.w_index(s, e.dofs) for s in subs]
            if space == "wc":
                idx = [maps.w_to_wc[i] for i in idx]
            for c in e.coefficients:
                for a, b in zip(idx[:-1], idx[1:]):
                    rows += [np.full(len(c), r), np.full(len(c), r)]
                    cols += [a, b]
                    vals += [c, -c]
                    r += 1
        n = maps.n_wc if space == "wc" else maps.n_w
        if r == 0:
            return sp.csr_matrix((0, n))
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(r, n))

    def dump(self, globset):
        lines = []
        for k, e in sorted(self.entries.items()):
            g = globset.globs[k]
            for c, p in zip(e.coefficients, e.provenance):
                coeffs = " ".join(f"{v:.10g}" for v in c)
                lines.append(f"{k} {g.kind} {p} {coeffs}")
        return "\n".join(lines) + ("\n" if lines else "")


def arithmetic_constraints(ss, which="edges"):
    """Unit-weight averages per component over edges and/or faces.

    ``which`` is one of ``"none"``, ``"edges"``, ``"faces"``, ``"edges+faces"``.
    """
    kinds = {"none": (), "edges": ("edge",), "faces": ("face",),
             "edges+faces": ("edge", "face")}[which]
    d = ss.mesh.dofs_per_node
    cs = ConstraintSet()
    for k, g in enumerate(ss.globs.globs):
        if g.kind not in kinds:
            continue
        dofs = ss.glob_dofs(k)
        comp = dofs % d
        rows = [(comp == c).astype(float) for c in range(d) if np.any(comp == c)]
        if rows:
            cs.add(k, dofs, np.array(rows), "arithmetic")
    return cs


@dataclass
class GlobTransform:
    """Change of variables on one glob, in the glob's dof order.

    ``H`` maps original to new variables, ``T = H^{-1}``; the new variable of
    average ``l`` is stored in the slot of dof ``explicit[l]``.
    """

    glob: int
    dofs: np.ndarray
    perm: np.ndarray
    U: np.ndarray
    V: np.ndarray
    H: np.ndarray
    T: np.ndarray

    @property
    def rank(self):
        return self.U.shape[0]

    @property
    def explicit(self):
        return self.perm[:self.rank]


def glob_transform(coefficients, glob=-1, dofs=None, drop_tol=QR_DROP_TOL):
    """Pivoted-QR change of variables making the averages explicit dofs."""
    h = np.atleast_2d(np.asarray(coefficients, dtype=float))
    n = h.shape[1]
    qr = pivoted_qr(h, drop_tol)
    r = qr.rank
    if r < h.shape[0]:
        warnings.warn(f"glob {glob}: dropped {h.shape[0] - r} numerically redundant averages",
                      RankDeficientAverages, stacklevel=2)
    u = qr.r[:r, :r]
    v = qr.r[:r, r:]
    hk = np.eye(n)
    hk[:r, :r] = u
    hk[:r, r:] = v
    uinv = np.linalg.solve(u, np.eye(r))
    tk = np.eye(n)
    tk[:r, :r] = uinv
    tk[:r, r:] = -uinv @ v
    perm = qr.perm
    # slot layout: new variable p lives where original dof perm[p] was
    hs = np.empty((n, n))
    hs[perm, :] = hk[:, np.argsort(perm)]
    ts = np.empty((n, n))
    ts[np.ix_(perm, perm)] = tk
    return GlobTransform(glob, dofs if dofs is not None else np.arange(n), perm, u, v, hs, ts)


@dataclass
class ChangeOfVariables:
    transforms: dict            # glob -> GlobTransform
    T: sp.csr_matrix = field(repr=False)   # block diagonal on W

    def subdomain_block(self, ss, i):
        lo, hi = ss.maps.offsets[i], ss.maps.offsets[i + 1]
        return self.T[lo:hi, lo:hi]


@dataclass
class TransformedConstraints:
    """Rows of ``D̄^c``: one +1 at ``plus[k]`` and one -1 at ``minus[k]`` (Wc indices)."""

    plus: np.ndarray
    minus: np.ndarray
    dim: int
    glob: np.ndarray

    @property
    def n_rows(self):
        return len(self.plus)

    @property
    def matrix(self):
        n = self.n_rows
        return sp.csr_matrix((np.r_[np.ones(n), -np.ones(n)],
                              (np.r_[np.arange(n), np.arange(n)], np.r_[self.plus, self.minus])),
                             shape=(n, self.dim))


def change_of_variables(constraints, ss, drop_tol=QR_DROP_TOL):
    maps = ss.maps
    transforms = {}
    rows, cols, vals = [], [], []
    touched = np.zeros(maps.n_w, dtype=bool)
    plus, minus, owner = [], [], []
    for k, e in sorted(constraints.entries.items()):
        tr = glob_transform(e.coefficients, k, e.dofs, drop_tol)
        transforms[k] = tr
        subs = ss.globs.globs[k].subdomains
        n = len(e.dofs)
        ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        idx = [maps.w_index(s, e.dofs) for s in subs]
        for w in idx:
            touched[w] = True
            rows.append(w[ii.ravel()])
            cols.append(w[jj.ravel()])
            vals.append(tr.T.ravel())
        slots = [maps.w_to_wc[w[tr.explicit]] for w in idx]
        for a, b in zip(slots[:-1], slots[1:]):
            plus.append(a)
            minus.append(b)
            owner.append(np.full(len(a), k))
    rest = np.flatnonzero(~touched)
    rows.append(rest)
    cols.append(rest)
    vals.append(np.ones(len(rest)))
    t = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(maps.n_w, maps.n_w))
    t.eliminate_zeros()
    cat = (lambda x: np.concatenate(x) if x else np.zeros(0, dtype=np.int64))
    tc = TransformedConstraints(cat(plus), cat(minus), maps.n_wc, cat(owner))
    return ChangeOfVariables(transforms, t), tc


def build_projection(d, dim=None):
    """Orthogonal projector onto null(D), ``I - D^T (D D^T)^{-1} D``, as sparse matrix.

    Rows are grouped into independent blocks (rows sharing no column), each
    handled densely.
    """
    d = sp.csr_matrix(d)
    dim = d.shape[1] if dim is None else dim
    if d.shape[0] == 0:
        return sp.identity(dim, format="csr")
    pattern = d.copy()
    pattern.data[:] = 1.0
    nblocks, label = connected_components(pattern @ pattern.T, directed=False)
    order = np.argsort(label, kind="stable")
    bounds = np.searchsorted(label[order], np.arange(nblocks + 1))
    rows, cols, vals = [], [], []
    diag_fix = np.ones(dim)
    for b in range(nblocks):
        rws = order[bounds[b]:bounds[b + 1]]
        sub = d[rws]
        support = np.unique(sub.indices)
        db = sub[:, support].toarray()
        gram = db @ db.T
        try:
            chol = np.linalg.cholesky(gram)
        except np.linalg.LinAlgError:
            chol = None
        if chol is None or np.diag(chol).min() ** 2 < 1e-12 * np.diag(gram).max():
            raise SingularGram(f"constraint rows {rws.tolist()} are linearly dependent")
        x = np.linalg.solve(gram, db)
        blk = -db.T @ x
        ii, jj = np.meshgrid(support, support, indexing="ij")
        rows.append(ii.ravel())
        cols.append(jj.ravel())
        vals.append(blk.ravel())
    proj = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(dim, dim)) + sp.diags(diag_fix)
    proj = proj.tocsr()
    proj.data[np.abs(proj.data) < 1e-15] = 0.0
    proj.eliminate_zeros()
    return proj


@dataclass
class BddcOperator:
    substructure: object = field(repr=False)
    constraints: ConstraintSet
    A_tilde: sp.csr_matrix = field(repr=False)
    factor: Factorization = field(repr=False)
    T: sp.csr_matrix = field(repr=False)
    Pi: sp.csr_matrix = field(repr=False)
    t: float
    cov: ChangeOfVariables | None = field(default=None, repr=False)
    tc: TransformedConstraints | None = field(default=None, repr=False)
    projected: sp.csr_matrix | None = field(default=None, repr=False)
    refine: int = 2

    @property
    def n_constraints(self):
        return self.constraints.n_rows(self.substructure.globs)

    def coarse_rhs(self, r_u):
        """``Π̄ Rc^T T^T E^T r`` for a residual ``r`` in U (zero in interiors)."""
        ss = self.substructure
        x = ss.averaging.apply_transpose(r_u)
        return self.Pi @ (ss.maps.Rc.T @ (self.T.T @ x))

    def stabilized_apply(self, w):
        """``Ã w`` from its factors, without the rounding of the assembled ``t (I - Π̄)``."""
        pw = self.Pi @ w
        return self.Pi @ (self.projected @ pw) + self.t * (w - pw)

    def solve_coarse(self, r_u):
        """``Ã^{-1} Π̄ Rc^T T^T E^T r`` with a few steps of iterative refinement.

        For large ``t`` the assembled ``Ã`` carries rounding errors of size
        ``eps * t``; refining against :meth:`stabilized_apply` removes them.
        """
        b = self.coarse_rhs(r_u)
        w = self.factor.solve(b)
        for _ in range(self.refine):
            w = w + self.factor.solve(b - self.stabilized_apply(w))
        return w

    def apply_u(self, r_u, harmonic=True):
        """Preconditioner on a full U vector: ``(I - P) E T Rc w̄``.

        With ``harmonic=False`` the interior extension is skipped; the
        interface values are the same either way.
        """
        ss = self.substructure
        wbar = self.solve_coarse(r_u)
        u = ss.averaging.apply(self.T @ (ss.maps.Rc @ wbar))
        if harmonic:
            maps = ss.maps
            for s in ss.systems:
                if len(s.interior):
                    g = u[maps.w_to_u[maps.offsets[s.index] + s.interface]]
                    fac, _, aig, _ = ss.extension.blocks[s.index]
                    u[maps.w_to_u[maps.offsets[s.index] + s.interior]] = -fac.solve(aig @ g)
        return u

    def __call__(self, r):
        """Preconditioner on interface residuals (ordered as ``maps.interface_u``)."""
        return apply_preconditioner(self, r)


def apply_preconditioner(op, r):
    maps = op.substructure.maps
    r_u = np.zeros(maps.n_u)
    r_u[maps.interface_u] = r
    return op.apply_u(r_u, harmonic=False)[maps.interface_u]


def assemble_stabilized(ss, constraints, t=None, transform=True, drop_tol=QR_DROP_TOL,
                        factorize=True):
    """Build ``Ã = Π̄ Rc^T T^T A T Rc Π̄ + t (I - Π̄)`` and factorize it.

    With ``transform=False`` no change of variables is made and the projection
    is built straight from ``D^c`` (denser, kept for comparison). ``t``
    defaults to the largest diagonal entry of ``A^c``. ``factorize=False``
    skips the factorization (for structural inspection of singular setups).
    """
    maps = ss.maps
    constraints = constraints.filtered(drop_tol)
    a = block_operator(ss.systems)
    if transform:
        cov, tc = change_of_variables(constraints, ss, drop_tol)
        tmat = cov.T
        ahat = (maps.Rc.T @ (tmat.T @ a @ tmat) @ maps.Rc).tocsr()
        pi = build_projection(tc.matrix, maps.n_wc)
    else:
        cov = tc = None
        tmat = sp.identity(maps.n_w, format="csr")
        ahat = (maps.Rc.T @ a @ maps.Rc).tocsr()
        pi = build_projection(constraints.matrix(ss, "wc"), maps.n_wc)
    if t is None:
        t = float((maps.Rc.T @ a @ maps.Rc).diagonal().max())
    if t <= 0:
        raise ValueError("stabilization parameter must be positive")
    eye = sp.identity(maps.n_wc, format="csr")
    atilde = (pi @ ahat @ pi + t * (eye - pi)).tocsr()
    atilde = 0.5 * (atilde + atilde.T)
    atilde.data[np.abs(atilde.data) < 1e-14 * t] = 0.0
    atilde.eliminate_zeros()
    factor = Factorization(atilde, "definite") if factorize else None
    return BddcOperator(ss, constraints, atilde.tocsr(), factor, tmat, pi, t, cov, tc, ahat)
