"""Small linear-algebra kernel shared by the substructuring code.

Sparse symmetric matrices are plain ``scipy.sparse`` CSR/CSC matrices; this
module adds assembly from triplets, a direct factorization with a definiteness
check, pivoted QR, and a dense generalized symmetric eigensolver that works in
the factor space modulo the null space of the right-hand side.
"""

from dataclasses import dataclass

import numpy as np
import scipy.io
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.linalg import splu


class NotPositiveDefinite(np.linalg.LinAlgError):
    """A nonpositive pivot appeared while factorizing a definite matrix."""


class NullspaceInclusionViolated(np.linalg.LinAlgError):
    """The left-hand side does not vanish on the null space of the right-hand side."""


QR_DROP_TOL = 1e-8
PIVOT_TOL = 1e-12


def sym_from_triplets(n, rows, cols, vals):
    """Assemble an ``n x n`` symmetric CSR matrix from upper-triangle triplets.

    Entries with ``row > col`` are mirrored into the upper triangle first, and
    repeated index pairs are summed, so element-by-element assembly can simply
    append its contributions.
    """
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    vals = np.asarray(vals, dtype=float)
    lo = np.minimum(rows, cols)
    hi = np.maximum(rows, cols)
    upper = sp.coo_matrix((vals, (lo, hi)), shape=(n, n)).tocsr()
    upper.sum_duplicates()
    strict = sp.triu(upper, k=1)
    return (upper + strict.T).tocsr()


def export_matrix_market(path, matrix, comment=""):
    """Write a sparse matrix in Matrix Market coordinate format."""
    scipy.io.mmwrite(str(path), sp.coo_matrix(matrix), comment=comment)


class Factorization:
    """Direct LDL^T-style factorization of a sparse symmetric matrix.

    ``kind="definite"`` requires every pivot to be positive (relative to the
    largest diagonal entry); ``kind="semidefinite-with-shift"`` adds
    ``shift * max|diag|`` to the diagonal before factorizing.
    """

    def __init__(self, matrix, kind="definite", shift=1e-10):
        if kind not in ("definite", "semidefinite-with-shift"):
            raise ValueError(f"unknown factorization kind {kind!r}")
        a = sp.csc_matrix(matrix, dtype=float)
        n = a.shape[0]
        if a.shape != (n, n):
            raise ValueError("matrix must be square")
        self.matrix = a
        self.kind = kind
        self.shape = a.shape
        scale = abs(a.diagonal()).max() if n else 1.0
        if kind == "semidefinite-with-shift":
            a = (a + shift * scale * sp.identity(n, format="csc")).tocsc()
        self._lu = None
        self.definite = True
        if n == 0:
            return
        try:
            lu = splu(a, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                      options=dict(SymmetricMode=True))
        except RuntimeError as exc:
            raise NotPositiveDefinite(f"factorization failed: {exc}") from exc
        pivots = lu.U.diagonal()
        symmetric_pivoting = np.array_equal(lu.perm_r, lu.perm_c)
        if not symmetric_pivoting or pivots.min() <= PIVOT_TOL * scale:
            self.definite = False
            if kind == "definite":
                raise NotPositiveDefinite(
                    f"smallest pivot {pivots.min():.3e} relative to max diagonal {scale:.3e}")
        self._lu = lu
        self.pivots = pivots

    def solve(self, b):
        b = np.asarray(b, dtype=float)
        if self.shape[0] == 0:
            return np.zeros_like(b)
        return self._lu.solve(b)


def factorize(matrix, kind="definite"):
    return Factorization(matrix, kind=kind)


@dataclass(frozen=True)
class PivotedQR:
    """``rect[:, perm] = q @ r``; ``r[:, :m]`` is the triangular block U."""

    q: np.ndarray
    r: np.ndarray
    perm: np.ndarray
    rank: int

    @property
    def u(self):
        return self.r[:, :self.r.shape[0]]

    @property
    def v(self):
        return self.r[:, self.r.shape[0]:]

    def permutation_matrix(self):
        """K with rect = Q [U V] K."""
        n = len(self.perm)
        k = np.zeros((n, n))
        k[np.arange(n), self.perm] = 1.0
        return k


def pivoted_qr(rect, drop_tol=QR_DROP_TOL):
    """QR with column pivoting (LAPACK geqp3) and a relative rank estimate.

    The rank counts diagonal entries of U above ``drop_tol * |U_11|``.
    Requires ``rows <= cols`` so that U is square.
    """
    rect = np.atleast_2d(np.asarray(rect, dtype=float))
    m, n = rect.shape
    if m > n:
        raise ValueError("pivoted_qr expects at most as many rows as columns")
    if m == 0:
        return PivotedQR(np.zeros((0, 0)), np.zeros((0, n)), np.arange(n), 0)
    q, r, perm = sla.qr(rect, pivoting=True, mode="full")
    diag = np.abs(np.diag(r))
    rank = 0 if diag[0] == 0.0 else int(np.sum(diag > drop_tol * diag[0]))
    return PivotedQR(q, r, perm, rank)


@dataclass
class EigenReport:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    requested: int | None


def _orth_complement(basis, n):
    if basis is None or basis.shape[1] == 0:
        return np.eye(n)
    q, _ = np.linalg.qr(basis, mode="complete")
    return q[:, basis.shape[1]:]


def generalized_eig_sym(lhs, rhs, k=None, null_basis=None, null_tol=1e-10,
                        inclusion_tol=1e-8):
    """Largest eigenpairs of ``lhs x = lam rhs x`` on the factor space mod null(rhs).

    Both matrices are dense, symmetric and positive semidefinite. ``null_basis``
    may supply a basis of null(rhs) (for instance rigid body modes); otherwise
    it is detected from an eigendecomposition of ``rhs`` with relative
    tolerance ``null_tol``. Eigenvalues come back in nonincreasing order with
    rhs-orthonormal eigenvectors in the original coordinates.
    """
    lhs = np.asarray(lhs, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    n = lhs.shape[0]
    if n == 0:
        return EigenReport(np.zeros(0), np.zeros((0, 0)), k)
    lhs = 0.5 * (lhs + lhs.T)
    rhs = 0.5 * (rhs + rhs.T)
    scale_l = max(np.abs(lhs).max(), np.finfo(float).tiny)

    if null_basis is None:
        mu, vecs = np.linalg.eigh(rhs)
        cut = null_tol * max(mu.max(), 0.0)
        null = vecs[:, mu <= cut]
        keep = vecs[:, mu > cut]
    else:
        null = np.linalg.qr(np.asarray(null_basis, dtype=float))[0] if null_basis.shape[1] else null_basis
        keep = _orth_complement(null, n)

    if null.shape[1]:
        leak = np.linalg.norm(lhs @ null, axis=0).max()
        if leak > inclusion_tol * scale_l * np.sqrt(n):
            raise NullspaceInclusionViolated(
                f"lhs applied to null(rhs) has norm {leak:.3e} (scale {scale_l:.3e})")

    b = keep.T @ rhs @ keep
    c = keep.T @ lhs @ keep
    try:
        lam, y = sla.eigh(c, b)
    except np.linalg.LinAlgError as exc:
        raise NullspaceInclusionViolated(
            f"rhs is singular on the complement of the supplied null space: {exc}") from exc
    order = np.argsort(lam)[::-1]
    lam = lam[order]
    y = y[:, order]
    if k is not None:
        lam = lam[:k]
        y = y[:, :k]
    return EigenReport(lam, keep @ y, k)
