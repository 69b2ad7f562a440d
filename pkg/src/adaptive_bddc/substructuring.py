"""Interface classification, corner assembly and the basic substructuring maps.

Index spaces used throughout the package:

* global dofs -- ``dofs_per_node * node + component`` over all mesh nodes;
* ``U``  -- free (non-Dirichlet) global dofs, i.e. continuous vectors;
* ``W``  -- concatenation of the subdomain local dof vectors;
* ``Wc`` -- like ``W`` but with one shared copy per corner dof.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial import ConvexHull

from .linalg import Factorization

HEX_EDGES = ((0, 1), (1, 2), (2, 3), (3, 0), (4, 5), (5, 6), (6, 7), (7, 4),
             (0, 4), (1, 5), (2, 6), (3, 7))


class CornerSelectionFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class Glob:
    kind: str                   # "corner", "edge" or "face"
    nodes: tuple
    subdomains: tuple

    @property
    def multiplicity(self):
        return len(self.subdomains)


@dataclass
class GlobSet:
    globs: list

    @property
    def corners(self):
        return [g for g in self.globs if g.kind == "corner"]

    @property
    def edges(self):
        return [g for g in self.globs if g.kind == "edge"]

    @property
    def faces(self):
        return [g for g in self.globs if g.kind == "face"]

    def corner_nodes(self):
        return np.array(sorted(g.nodes[0] for g in self.corners), dtype=np.int64)

    def index(self, kind):
        return [k for k, g in enumerate(self.globs) if g.kind == kind]

    def face_between(self, i, j):
        key = tuple(sorted((i, j)))
        for k, g in enumerate(self.globs):
            if g.kind == "face" and g.subdomains == key:
                return k
        return None

    def summary(self):
        """Plain-text glob statistics."""
        lines = [f"corners {len(self.corners)}", f"edges {len(self.edges)}",
                 f"faces {len(self.faces)}"]
        for k, g in enumerate(self.globs):
            if g.kind != "corner":
                subs = " ".join(map(str, g.subdomains))
                lines.append(f"glob {k} {g.kind} nodes {len(g.nodes)} subdomains {subs}")
        return "\n".join(lines) + "\n"


def node_adjacency(mesh):
    e = mesh.elements
    a = np.concatenate([e[:, i] for i, _ in HEX_EDGES])
    b = np.concatenate([e[:, j] for _, j in HEX_EDGES])
    n = mesh.n_nodes
    adj = sp.coo_matrix((np.ones(2 * len(a)), (np.r_[a, b], np.r_[b, a])), shape=(n, n)).tocsr()
    adj.data[:] = 1.0
    return adj


def classify_globs(mesh, decomposition, split_edge_endpoints=True):
    """Partition interface nodes into corners, edges and faces by sharing set.

    Nodes shared by exactly one pair form that pair's face; nodes shared by the
    same set of more than two subdomains form an edge, or a corner when the set
    holds a single node. With ``split_edge_endpoints`` the free ends of each
    edge (ends not already touching a corner, typically on the outer boundary)
    are turned into corners as well.
    """
    groups = {}
    for node, subs in enumerate(decomposition.node_subdomains):
        if len(subs) > 1:
            groups.setdefault(subs, []).append(node)
    globs = []
    for subs, nodes in sorted(groups.items()):
        if len(subs) == 2:
            globs.append(Glob("face", tuple(nodes), subs))
        elif len(nodes) == 1:
            globs.append(Glob("corner", tuple(nodes), subs))
        else:
            globs.append(Glob("edge", tuple(nodes), subs))
    if split_edge_endpoints:
        globs = _split_edge_endpoints(mesh, globs)
    return GlobSet(_ordered(globs))


def _ordered(globs):
    rank = {"corner": 0, "edge": 1, "face": 2}
    return sorted(globs, key=lambda g: (rank[g.kind], g.subdomains, g.nodes))


def _split_edge_endpoints(mesh, globs):
    adj = node_adjacency(mesh)
    corners = {g.nodes[0] for g in globs if g.kind == "corner"}
    out = [g for g in globs if g.kind != "edge"]
    for g in globs:
        if g.kind != "edge":
            continue
        members = set(g.nodes) | corners
        ends = []
        for node in g.nodes:
            nbrs = adj.indices[adj.indptr[node]:adj.indptr[node + 1]]
            if sum(1 for m in nbrs if m in members and m != node) <= 1:
                ends.append(node)
        rest = tuple(n for n in g.nodes if n not in ends)
        out.extend(Glob("corner", (n,), g.subdomains) for n in ends)
        if len(rest) == 1:
            out.append(Glob("corner", rest, g.subdomains))
        elif rest:
            out.append(Glob("edge", rest, g.subdomains))
    return out


def _extension_scores(face_xyz, chosen_xyz):
    """How far each face node extends the chosen corner set.

    Distance to the centroid of the face when nothing is chosen yet, to the
    single chosen point, or to the line through a collinear chosen set.
    """
    if len(chosen_xyz) == 0:
        return np.linalg.norm(face_xyz - face_xyz.mean(axis=0), axis=1)
    centre = chosen_xyz.mean(axis=0)
    if len(chosen_xyz) > 1:
        _, s, vt = np.linalg.svd(chosen_xyz - centre)
        if s[0] > 1e-12:
            rel = face_xyz - centre
            return np.linalg.norm(rel - np.outer(rel @ vt[0], vt[0]), axis=1)
    return np.linalg.norm(face_xyz - chosen_xyz[0], axis=1)


def _face_vertices(face_xyz):
    """Positions (into ``face_xyz``) of the vertices of the face polygon.

    The face is projected onto its best-fit plane and the convex hull of the
    projection is taken; a degenerate (collinear) face yields its two ends.
    """
    n = len(face_xyz)
    if n <= 2:
        return np.arange(n)
    centred = face_xyz - face_xyz.mean(axis=0)
    _, s, vt = np.linalg.svd(centred, full_matrices=False)
    if s[0] < 1e-12:
        return np.arange(1)
    if len(s) < 2 or s[1] < 1e-10 * s[0]:
        t = centred @ vt[0]
        return np.unique([int(np.argmin(t)), int(np.argmax(t))])
    return np.sort(ConvexHull(centred @ vt[:2].T).vertices)


def _pick_next(face_xyz, chosen_xyz, candidates):
    """Candidates (positions into ``face_xyz``) tied for the best extension score.

    Taking every tied candidate keeps the selection symmetric on symmetric faces.
    """
    score = _extension_scores(face_xyz[candidates], chosen_xyz)
    best = score.max()
    return [int(c) for c in np.asarray(candidates)[score >= best - 1e-10 * max(best, 1.0)]]


def _corner_requirement_met(xyz, physics):
    if physics == "scalar":
        return len(xyz) >= 1
    if len(xyz) < 3:
        return False
    s = np.linalg.svd(xyz - xyz.mean(axis=0), compute_uv=False)
    return s[1] > 1e-10 * max(s[0], 1.0)


def select_corners(globset, mesh, physics=None):
    """Promote face nodes to corners until every face pair is well connected.

    Each pair of subdomains sharing a face must share at least one corner for
    the scalar problem and at least three non-collinear corners for
    elasticity. Missing corners are taken among the vertices of the face
    polygon, preferring those farthest from the corners already present; all
    vertices tied at the best distance are promoted together. Should the
    vertices run out, the remaining face nodes are used in the same way.
    """
    physics = physics or mesh.physics
    coords = mesh.coords
    corner_nodes = {g.nodes[0]: g.subdomains for g in globset.corners}
    globs = [g for g in globset.globs if g.kind != "face"]
    for face in globset.faces:
        i, j = face.subdomains
        shared = [n for n, subs in corner_nodes.items() if i in subs and j in subs]
        nodes = np.array(face.nodes, dtype=np.int64)
        xyz = coords[nodes]
        taken = np.zeros(len(nodes), dtype=bool)
        vertices = _face_vertices(xyz)
        while not _corner_requirement_met(coords[shared], physics):
            candidates = vertices[~taken[vertices]]
            if len(candidates) == 0:
                candidates = np.flatnonzero(~taken)
            if len(candidates) == 0:
                raise CornerSelectionFailed(
                    f"face between subdomains {i} and {j} cannot hold enough corners")
            for k in _pick_next(xyz, coords[shared], candidates):
                node = int(nodes[k])
                taken[k] = True
                shared.append(node)
                corner_nodes[node] = face.subdomains
                globs.append(Glob("corner", (node,), face.subdomains))
        rest = tuple(int(n) for n in nodes[~taken])
        if rest:
            globs.append(Glob("face", rest, face.subdomains))
    return GlobSet(_ordered(globs))


@dataclass
class EmbeddingMaps:
    """Index maps realizing ``R: U -> W`` and ``Rc: Wc -> W``."""

    n_dofs: int                 # all global dofs (fixed included)
    u_of_dof: np.ndarray        # global dof -> U index or -1
    offsets: np.ndarray         # start of each subdomain block in W
    w_dof: np.ndarray           # W index -> global dof
    w_sub: np.ndarray           # W index -> subdomain
    w_to_u: np.ndarray
    w_to_wc: np.ndarray
    corner_dofs: np.ndarray     # global dofs of corners
    interface_u: np.ndarray     # U indices of interface dofs
    R: sp.csr_matrix = field(repr=False)
    Rc: sp.csr_matrix = field(repr=False)

    @property
    def n_u(self):
        return self.R.shape[1]

    @property
    def n_w(self):
        return self.R.shape[0]

    @property
    def n_wc(self):
        return self.Rc.shape[1]

    def local(self, w, i):
        return w[self.offsets[i]:self.offsets[i + 1]]

    def w_index(self, i, dofs):
        """W indices of the given global dofs in subdomain ``i`` (must exist)."""
        lo, hi = self.offsets[i], self.offsets[i + 1]
        block = self.w_dof[lo:hi]
        pos = np.searchsorted(block, dofs)
        if np.any(pos >= len(block)) or np.any(block[np.minimum(pos, len(block) - 1)] != dofs):
            raise KeyError(f"dofs not present in subdomain {i}")
        return lo + pos


def build_embeddings(globset, decomposition, systems, mesh):
    n_dofs = mesh.n_dofs
    free = np.zeros(n_dofs, dtype=bool)
    for s in systems:
        free[s.dofs] = True
    u_of_dof = np.full(n_dofs, -1, dtype=np.int64)
    u_of_dof[free] = np.arange(free.sum())
    sizes = np.array([s.size for s in systems])
    offsets = np.r_[0, np.cumsum(sizes)]
    w_dof = np.concatenate([s.dofs for s in systems]) if systems else np.zeros(0, dtype=np.int64)
    w_sub = np.repeat(np.arange(len(systems)), sizes)
    w_to_u = u_of_dof[w_dof]

    corner_dofs = mesh.node_dofs(globset.corner_nodes())
    is_corner = np.zeros(n_dofs, dtype=bool)
    is_corner[corner_dofs] = True
    w_to_wc = np.empty(len(w_dof), dtype=np.int64)
    corner_wc = {}
    nxt = 0
    for k, dof in enumerate(w_dof):
        if is_corner[dof]:
            if dof not in corner_wc:
                corner_wc[dof] = nxt
                nxt += 1
            w_to_wc[k] = corner_wc[dof]
        else:
            w_to_wc[k] = nxt
            nxt += 1
    shared = np.array([len(s) > 1 for s in decomposition.node_subdomains])
    iface_dofs = np.flatnonzero(np.repeat(shared, mesh.dofs_per_node) & free)
    nw = len(w_dof)
    ones = np.ones(nw)
    R = sp.csr_matrix((ones, (np.arange(nw), w_to_u)), shape=(nw, int(free.sum())))
    Rc = sp.csr_matrix((ones, (np.arange(nw), w_to_wc)), shape=(nw, nxt))
    return EmbeddingMaps(n_dofs, u_of_dof, offsets, w_dof, w_sub, w_to_u, w_to_wc,
                         corner_dofs[free[corner_dofs]], u_of_dof[iface_dofs], R, Rc)


def block_operator(systems):
    """Block diagonal ``A = diag(A_i)`` acting on W."""
    return sp.block_diag([s.A for s in systems], format="csr")


def assemble_corner_operator(systems, maps):
    """``A^c = Rc^T A Rc``: subdomain matrices assembled at corners only."""
    a = block_operator(systems)
    return (maps.Rc.T @ a @ maps.Rc).tocsr()


class HarmonicExtension:
    """Interior factorizations and the discrete harmonic extension ``I - P``."""

    def __init__(self, systems):
        self.systems = systems
        self.blocks = []
        for s in systems:
            a = s.A.tocsr()
            aii = a[s.interior][:, s.interior]
            aig = a[s.interior][:, s.interface]
            agg = a[s.interface][:, s.interface]
            fac = Factorization(aii) if len(s.interior) else None
            self.blocks.append((fac, aii, aig.tocsr(), agg.tocsr()))
        self._schur = {}

    def interior_solve(self, i, rhs):
        fac = self.blocks[i][0]
        return np.zeros_like(rhs) if fac is None else fac.solve(rhs)

    def extend(self, i, boundary):
        """Full local vector with given interface values and harmonic interior."""
        s = self.systems[i]
        fac, _, aig, _ = self.blocks[i]
        out = np.zeros(s.size if np.ndim(boundary) == 1 else (s.size, boundary.shape[1]))
        out[s.interface] = boundary
        if fac is not None:
            out[s.interior] = -fac.solve(aig @ boundary)
        return out

    def correct(self, i, w):
        """``(I - P) w`` on subdomain ``i``: keep interface values, re-extend."""
        return self.extend(i, np.asarray(w)[self.systems[i].interface])

    def schur_apply(self, i, x):
        fac, _, aig, agg = self.blocks[i]
        y = agg @ x
        if fac is not None:
            y = y - aig.T @ fac.solve(aig @ x)
        return y

    def schur_dense(self, i):
        if i not in self._schur:
            n = len(self.systems[i].interface)
            self._schur[i] = self.schur_apply(i, np.eye(n)) if n else np.zeros((0, 0))
            self._schur[i] = 0.5 * (self._schur[i] + self._schur[i].T)
        return self._schur[i]


def harmonic_extend(extension, boundary_values):
    """Extend interface data of every subdomain harmonically into its interior."""
    return [extension.extend(i, g) for i, g in enumerate(boundary_values)]


@dataclass
class AveragingOperator:
    """Weighted interface averaging ``E: W -> U``.

    ``weights[k]`` is the weight of W entry ``k``; weights of all copies of a
    dof sum to one and interior dofs have weight one.
    """

    weights: np.ndarray
    maps: EmbeddingMaps = field(repr=False)

    @property
    def matrix(self):
        m = self.maps
        return sp.csr_matrix((self.weights, (m.w_to_u, np.arange(m.n_w))), shape=(m.n_u, m.n_w))

    def apply(self, w):
        return np.bincount(self.maps.w_to_u, weights=self.weights * w, minlength=self.maps.n_u)

    def apply_transpose(self, r):
        return self.weights * np.asarray(r)[self.maps.w_to_u]


def build_averaging(systems, maps, kind="stiffness"):
    """Weights proportional to the local diagonal stiffness (or ``"cardinality"``)."""
    if kind == "stiffness":
        diag = np.concatenate([s.A.diagonal() for s in systems])
    elif kind == "cardinality":
        diag = np.ones(maps.n_w)
    else:
        raise ValueError(f"unknown averaging kind {kind!r}")
    total = np.bincount(maps.w_to_u, weights=diag, minlength=maps.n_u)
    return AveragingOperator(diag / total[maps.w_to_u], maps)


def glob_dofs(mesh, glob, maps):
    """Free global dofs of a glob, ordered node-major."""
    dofs = mesh.node_dofs(np.array(glob.nodes))
    return dofs[maps.u_of_dof[dofs] >= 0]


@dataclass
class Substructure:
    """A problem split into subdomains together with all derived maps."""

    problem: object
    systems: list
    globs: GlobSet
    maps: EmbeddingMaps
    extension: HarmonicExtension
    averaging: AveragingOperator

    @property
    def mesh(self):
        return self.problem.mesh

    @property
    def physics(self):
        return self.problem.mesh.physics

    def glob_dofs(self, k):
        return glob_dofs(self.mesh, self.globs.globs[k], self.maps)

    def corner_operator(self):
        return assemble_corner_operator(self.systems, self.maps)


def substructure(problem, globs=None, averaging="stiffness"):
    """Assemble subdomain systems and build globs, corners and maps."""
    systems = problem.systems()
    if globs is None:
        globs = select_corners(classify_globs(problem.mesh, problem.decomposition), problem.mesh)
    maps = build_embeddings(globs, problem.decomposition, systems, problem.mesh)
    return Substructure(problem, systems, globs, maps, HarmonicExtension(systems),
                        build_averaging(systems, maps, averaging))
