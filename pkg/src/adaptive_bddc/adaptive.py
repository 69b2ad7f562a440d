"""Adaptive selection of weighted face averages from pair eigenproblems.

For every pair of subdomains sharing a face the local generalized eigenproblem

    Π (I - E)^T S (I - E) Π w = λ Π S Π w

is solved densely on the pair interface space, where ``S`` is the block
Schur complement of the two subdomains with their shared corners assembled,
``E`` the pair averaging and ``Π`` the orthogonal projector onto the null space
of the constraints already present. Eigenvectors whose eigenvalue exceeds a
threshold are turned into constraint rows and split per glob.
"""

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .constraints import ConstraintSet
from .fem import rigid_body_modes
from .linalg import generalized_eig_sym


class NotAdjacent(ValueError):
    """The two subdomains do not share a face."""


@dataclass
class SubdomainPair:
    """Dense pair operators on ``V``, the interface of two subdomains with shared corners merged.

    Pair W-space is ``[interface of i; interface of j]``; ``rc`` maps V into it.
    """

    i: int
    j: int
    face: int
    dofs: tuple                 # global interface dofs of i and of j
    v_of_w: np.ndarray          # W position -> V index
    S: np.ndarray = field(repr=False)       # blockdiag(S_i, S_j) on pair W
    E: np.ndarray = field(repr=False)       # pair averaging, a projection on pair W
    D: np.ndarray = field(repr=False)       # base constraints on V
    Z: np.ndarray = field(repr=False)       # orthonormal basis of null(D)
    null_modes: np.ndarray = field(repr=False)  # block rigid modes on pair W
    globs: dict = field(repr=False)         # glob -> (W positions in i, W positions in j)
    ss: object = field(default=None, repr=False)

    @property
    def n_w(self):
        return len(self.v_of_w)

    @property
    def n_v(self):
        return int(self.v_of_w.max()) + 1 if len(self.v_of_w) else 0

    @property
    def rc(self):
        out = np.zeros((self.n_w, self.n_v))
        out[np.arange(self.n_w), self.v_of_w] = 1.0
        return out

    @property
    def projector(self):
        return self.Z @ self.Z.T

    def schur_apply(self, v):
        """``S^c v = Rc^T S Rc v`` through interior solves on each subdomain."""
        w = np.asarray(v)[self.v_of_w]
        ni = len(self.dofs[0])
        y = np.concatenate([self.ss.extension.schur_apply(self.i, w[:ni]),
                            self.ss.extension.schur_apply(self.j, w[ni:])])
        return np.bincount(self.v_of_w, weights=y, minlength=self.n_v)

    def operators(self):
        """Left and right matrices of the pencil in V (no projection)."""
        rc = self.rc
        jump = rc - self.E @ rc
        return jump.T @ self.S @ jump, rc.T @ self.S @ rc


def _block_null_modes(ss, i, positions):
    """Rigid modes of subdomain ``i`` that vanish on its fixed dofs, on ``positions``."""
    mesh = ss.mesh
    sub_nodes = np.array([n for n, subs in enumerate(ss.problem.decomposition.node_subdomains)
                          if i in subs], dtype=np.int64)
    all_dofs = mesh.node_dofs(sub_nodes)
    modes = rigid_body_modes(mesh.coords[sub_nodes], mesh.physics)
    free = ss.maps.u_of_dof[all_dofs] >= 0
    if not free.all():
        modes = modes @ sla.null_space(modes[~free])
    if modes.shape[1] == 0:
        return np.zeros((len(positions), 0))
    where = np.searchsorted(all_dofs, positions)
    return modes[where]


def build_pair(ss, base, i, j):
    """Pair operators for subdomains ``i < j`` sharing a face.

    ``base`` is the ConstraintSet already installed; its averages on globs
    shared by both subdomains form the pair constraints ``D^c_ij``.
    """
    i, j = sorted((int(i), int(j)))
    face = ss.globs.face_between(i, j)
    if face is None:
        raise NotAdjacent(f"subdomains {i} and {j} do not share a face")
    si, sj = ss.systems[i], ss.systems[j]
    gi, gj = si.dofs[si.interface], sj.dofs[sj.interface]
    ni, nj = len(gi), len(gj)

    # V numbering: all of i, then j except corners shared with i
    corner = np.zeros(ss.maps.n_dofs, dtype=bool)
    corner[ss.maps.corner_dofs] = True
    pos_i = {d: k for k, d in enumerate(gi)}
    v_of_w = np.empty(ni + nj, dtype=np.int64)
    v_of_w[:ni] = np.arange(ni)
    nxt = ni
    for k, d in enumerate(gj):
        if corner[d] and d in pos_i:
            v_of_w[ni + k] = pos_i[d]
        else:
            v_of_w[ni + k] = nxt
            nxt += 1

    s = sla.block_diag(ss.extension.schur_dense(i), ss.extension.schur_dense(j))

    # averaging renormalized over the two copies of each shared dof
    wts = ss.averaging.weights
    di = wts[ss.maps.w_index(i, gi)]
    dj = wts[ss.maps.w_index(j, gj)]
    shared, ai, aj = np.intersect1d(gi, gj, return_indices=True)
    e = np.eye(ni + nj)
    tot = di[ai] + dj[aj]
    wi, wj = di[ai] / tot, dj[aj] / tot
    pi_, pj_ = ai, ni + aj
    e[pi_, pi_] = wi
    e[pj_, pj_] = wj
    e[pj_, pi_] = wi
    e[pi_, pj_] = wj

    globs = {}
    for k, g in enumerate(ss.globs.globs):
        if g.kind == "corner" or i not in g.subdomains or j not in g.subdomains:
            continue
        dofs = ss.glob_dofs(k)
        globs[k] = (np.searchsorted(gi, dofs), ni + np.searchsorted(gj, dofs))

    rows = []
    for k, entry in sorted(base.entries.items()):
        if k not in globs:
            continue
        a, b = globs[k]
        for c in entry.coefficients:
            r = np.zeros(ni + nj)
            r[a] = c
            r[b] = -c
            rows.append(np.bincount(v_of_w, weights=r, minlength=nxt))
    d = np.array(rows) if rows else np.zeros((0, nxt))
    z = sla.null_space(d) if len(d) else np.eye(nxt)

    modes = sla.block_diag(_block_null_modes(ss, i, gi), _block_null_modes(ss, j, gj))
    return SubdomainPair(i, j, face, (gi, gj), v_of_w, s, e, d, z, modes, globs, ss)


@dataclass
class PairEigenResult:
    i: int
    j: int
    eigenvalues: np.ndarray                 # nonincreasing
    eigenvectors: np.ndarray = field(repr=False)    # in V, S-orthonormal
    k: int                                  # number of vectors to turn into constraints
    saturated: bool = False                 # k hit max_vectors with λ_{k+1} still above τ
    rows: np.ndarray = field(default=None, repr=False)  # raw rows Π C Π w, in V

    @property
    def omega(self):
        """Largest eigenvalue of the pair problem (0 when the space is trivial)."""
        return float(self.eigenvalues[0]) if len(self.eigenvalues) else 0.0

    @property
    def remaining(self):
        """Largest eigenvalue left after the k constraints are enforced."""
        return float(self.eigenvalues[self.k]) if self.k < len(self.eigenvalues) else 0.0


def _pair_null_basis(pair):
    """Basis (in Z coordinates) of null(Z^T S^c Z), spanned by block rigid modes."""
    if pair.null_modes.shape[1] == 0:
        return np.zeros((pair.Z.shape[1], 0))
    rcz = pair.rc @ pair.Z
    stacked = np.hstack([rcz, -pair.null_modes])
    scale = max(np.abs(stacked).max(), 1.0)
    ker = sla.null_space(stacked, rcond=1e-10 * scale / max(stacked.shape))
    if ker.shape[1] == 0:
        return np.zeros((pair.Z.shape[1], 0))
    return sla.orth(ker[:pair.Z.shape[1]])


def solve_pair_eigenproblem(pair, tau=math.inf, max_vectors=15, fixed_k=None):
    """Eigenvalues of the pair pencil and the number of constraints needed.

    ``k`` is the smallest count such that ``λ_{k+1} <= tau``, capped at
    ``max_vectors`` (``None`` for no cap). ``fixed_k`` overrides the
    threshold and takes that many leading eigenvectors.
    """
    lhs, rhs = pair.operators()
    z = pair.Z
    report = generalized_eig_sym(z.T @ lhs @ z, z.T @ rhs @ z, null_basis=_pair_null_basis(pair))
    lam = np.clip(report.eigenvalues, 0.0, None)
    if fixed_k is not None:
        k = min(int(fixed_k), len(lam))
        saturated = False
    else:
        k = int(np.sum(lam > tau))
        saturated = max_vectors is not None and k > max_vectors
        if saturated:
            k = max_vectors
    y = report.eigenvectors
    vectors = z @ y
    rows = z @ ((z.T @ lhs @ z) @ y[:, :k])
    return PairEigenResult(pair.i, pair.j, lam, vectors, k, saturated, rows.T)


def indicator(results):
    """Heuristic condition number indicator: the largest pair eigenvalue."""
    return max((r.omega for r in results), default=0.0)


@dataclass
class AdaptiveConstraintRows:
    """Constraint rows from one pair, split per glob.

    ``raw`` holds the rows on pair W (copies of i then j); ``face`` the
    normalized functionals on the face dofs; ``edges`` maps edge globs to
    their functionals (empty unless edges are kept).
    """

    i: int
    j: int
    face: int
    raw: np.ndarray
    face_rows: np.ndarray
    edges: dict

    def as_constraints(self, ss):
        cs = ConstraintSet()
        cs.add(self.face, ss.glob_dofs(self.face), self.face_rows, "adaptive")
        for k, rows in self.edges.items():
            cs.add(k, ss.glob_dofs(k), rows, "adaptive")
        return cs


def _normalized(rows):
    rows = np.atleast_2d(rows)
    scale = np.abs(rows).max(axis=1, keepdims=True)
    keep = scale[:, 0] > 0
    return rows[keep] / scale[keep]


def extract_constraints(pair, result, keep_edges=False):
    """Split the raw rows of ``result`` into a face part and (optionally) edge parts."""
    raw = result.rows[:, pair.v_of_w] if result.k else np.zeros((0, pair.n_w))
    a, _ = pair.globs[pair.face]
    face_rows = _normalized(raw[:, a]) if len(raw) else np.zeros((0, len(a)))
    edges = {}
    if keep_edges and len(raw):
        for k, (ek, _) in pair.globs.items():
            if k != pair.face:
                rows = _normalized(raw[:, ek])
                if len(rows):
                    edges[k] = rows
    return AdaptiveConstraintRows(pair.i, pair.j, pair.face, raw, face_rows, edges)


def face_pairs(globset):
    return [tuple(g.subdomains) for g in globset.faces]


@dataclass
class Enrichment:
    constraints: ConstraintSet
    pairs: list                 # PairEigenResult per face pair
    rows: list                  # AdaptiveConstraintRows per face pair

    @property
    def indicator(self):
        """ω̃ of the pair problems before enrichment."""
        return indicator(self.pairs)

    @property
    def indicator_after(self):
        """Largest eigenvalue not removed by the new constraints, over all pairs."""
        return max((r.remaining for r in self.pairs), default=0.0)

    @property
    def saturated(self):
        return any(r.saturated for r in self.pairs)

    def report_csv(self):
        buf = io.StringIO()
        out = csv.writer(buf, lineterminator="\n")
        out.writerow(["i", "j", "omega", "k", "saturated", "eigenvalues"])
        for r in self.pairs:
            out.writerow([r.i, r.j, f"{r.omega:.10g}", r.k, int(r.saturated),
                          " ".join(f"{v:.10g}" for v in r.eigenvalues[:max(r.k + 1, 1)])])
        return buf.getvalue()


def adaptive_enrich(ss, base, tau=math.inf, max_vectors=15, keep_edges=False, fixed_k=None,
                    workers=1):
    """Add adaptive averages to ``base`` for every face pair.

    Pair problems are independent; ``workers > 1`` solves them in threads.
    The result is QR-filtered glob by glob.
    """
    def one(pair_ids):
        pair = build_pair(ss, base, *pair_ids)
        res = solve_pair_eigenproblem(pair, tau, max_vectors, fixed_k)
        return res, extract_constraints(pair, res, keep_edges)

    ids = face_pairs(ss.globs)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            done = list(pool.map(one, ids))
    else:
        done = [one(p) for p in ids]
    out = base.copy()
    for _, rows in done:
        out = out.merged(rows.as_constraints(ss))
    return Enrichment(out.filtered(), [d[0] for d in done], [d[1] for d in done])
