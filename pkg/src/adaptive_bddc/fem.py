"""Structured hexahedral meshes, decompositions and subdomain assembly.

Meshes are boxes of 8-node trilinear hexahedra laid out on a regular grid and
split into axis-aligned cubic subdomains. Two physics are supported: scalar
diffusion (one dof per node) and isotropic linear elasticity (three dofs per
node, interleaved ``3 * node + component``).
"""

import configparser
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .linalg import sym_from_triplets

PHYSICS_DOFS = {"scalar": 1, "elasticity": 3}
FACE_AXES = {"xmin": (0, 0), "xmax": (0, 1), "ymin": (1, 0), "ymax": (1, 1),
             "zmin": (2, 0), "zmax": (2, 1)}

# reference coordinates of the 8 hexahedron vertices, VTK ordering
HEX_REF = np.array([[-1, -1, -1], [1, -1, -1], [1, 1, -1], [-1, 1, -1],
                    [-1, -1, 1], [1, -1, 1], [1, 1, 1], [-1, 1, 1]], dtype=float)
GAUSS_1D = np.array([-1.0, 1.0]) / np.sqrt(3.0)


class DegenerateElement(ValueError):
    pass


@dataclass(frozen=True)
class Material:
    """Either a scalar conductivity or a Young modulus / Poisson ratio pair."""

    conductivity: float | None = None
    young: float | None = None
    poisson: float | None = None

    def __post_init__(self):
        if self.conductivity is None and self.young is None:
            raise ValueError("material needs a conductivity or a Young modulus")
        if self.conductivity is not None and self.conductivity <= 0:
            raise ValueError("conductivity must be positive")
        if self.young is not None:
            if self.young <= 0:
                raise ValueError("Young modulus must be positive")
            if self.poisson is None or not 0.0 <= self.poisson < 0.5:
                raise ValueError("Poisson ratio must lie in [0, 0.5)")

    def elasticity_matrix(self):
        e, nu = self.young, self.poisson
        lam = e * nu / ((1 + nu) * (1 - 2 * nu))
        mu = e / (2 * (1 + nu))
        d = np.zeros((6, 6))
        d[:3, :3] = lam
        d[np.arange(3), np.arange(3)] += 2 * mu
        d[np.arange(3, 6), np.arange(3, 6)] = mu
        return d


DEFAULT_MATERIALS = {
    "scalar": {0: Material(conductivity=1.0)},
    "elasticity": {0: Material(young=1.0, poisson=0.3)},
}


@dataclass
class Mesh:
    coords: np.ndarray          # (n_nodes, 3)
    elements: np.ndarray        # (n_elements, 8) node ids
    material: np.ndarray        # (n_elements,) material id
    grid: tuple                 # elements per axis
    physics: str = "elasticity"

    @property
    def n_nodes(self):
        return len(self.coords)

    @property
    def dofs_per_node(self):
        return PHYSICS_DOFS[self.physics]

    @property
    def n_dofs(self):
        return self.n_nodes * self.dofs_per_node

    def element_index(self, ix, iy, iz):
        ex, ey, _ = self.grid
        return ix + ex * (iy + ey * iz)

    def node_dofs(self, nodes):
        nodes = np.asarray(nodes, dtype=np.int64)
        d = self.dofs_per_node
        return (nodes[:, None] * d + np.arange(d)).ravel()

    def face_nodes(self, face):
        axis, side = FACE_AXES[face]
        x = self.coords[:, axis]
        bound = x.max() if side else x.min()
        return np.flatnonzero(np.isclose(x, bound))


@dataclass
class Decomposition:
    n_subdomains: int
    element_subdomain: np.ndarray
    node_subdomains: list = field(repr=False)   # sorted tuple per node
    grid: tuple | None = None

    def subdomain_elements(self, i):
        return np.flatnonzero(self.element_subdomain == i)

    def subdomain_nodes(self, mesh, i):
        return np.unique(mesh.elements[self.subdomain_elements(i)])

    def interface_nodes(self):
        return np.array([n for n, s in enumerate(self.node_subdomains) if len(s) > 1], dtype=np.int64)


def _decompose(mesh, element_subdomain, n_sub, grid=None):
    pairs = np.unique(np.column_stack([
        mesh.elements.ravel(), np.repeat(element_subdomain, 8)]), axis=0)
    node_subs = [[] for _ in range(mesh.n_nodes)]
    for node, s in pairs:
        node_subs[node].append(int(s))
    node_subs = [tuple(s) for s in node_subs]
    if any(not s for s in node_subs):
        raise ValueError("mesh has nodes not attached to any element")
    return Decomposition(n_sub, element_subdomain, node_subs, grid)


def build_cube_mesh(subdomains_per_axis, h_ratio, physics="elasticity", subdomain_size=1.0):
    """Box of ``nx*ny*nz`` cubic subdomains, each ``h_ratio**3`` elements."""
    nx, ny, nz = subdomains_per_axis
    if min(nx, ny, nz, h_ratio) < 1:
        raise ValueError("all counts must be >= 1")
    if physics not in PHYSICS_DOFS:
        raise ValueError(f"unknown physics {physics!r}")
    ex, ey, ez = nx * h_ratio, ny * h_ratio, nz * h_ratio
    h = subdomain_size / h_ratio
    ix, iy, iz = np.meshgrid(np.arange(ex + 1), np.arange(ey + 1), np.arange(ez + 1), indexing="ij")
    # node id = ix + (ex+1) * (iy + (ey+1) * iz)
    coords = np.column_stack([a.ravel(order="F") for a in (ix, iy, iz)]).astype(float) * h

    def nid(i, j, k):
        return i + (ex + 1) * (j + (ey + 1) * k)

    ci, cj, ck = np.meshgrid(np.arange(ex), np.arange(ey), np.arange(ez), indexing="ij")
    ci, cj, ck = (a.ravel(order="F") for a in (ci, cj, ck))
    offs = ((0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0), (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1))
    elements = np.column_stack([nid(ci + a, cj + b, ck + c) for a, b, c in offs])
    mesh = Mesh(coords, elements, np.zeros(len(elements), dtype=np.int64), (ex, ey, ez), physics)
    sub = (ci // h_ratio) + nx * ((cj // h_ratio) + ny * (ck // h_ratio))
    return mesh, _decompose(mesh, sub, nx * ny * nz, (nx, ny, nz))


def assign_material_box(mesh, box, material_id):
    """Set the material of elements with grid index in ``[x0,x1) x [y0,y1) x [z0,z1)``."""
    x0, x1, y0, y1, z0, z1 = box
    ex, ey, ez = mesh.grid
    ii, jj, kk = np.meshgrid(np.arange(x0, x1), np.arange(y0, y1), np.arange(z0, z1), indexing="ij")
    mesh.material[mesh.element_index(ii.ravel(), jj.ravel(), kk.ravel())] = material_id


def composite_bar_boxes(subdomains_per_axis, h_ratio, axis=2):
    """Element boxes of stiff bars, one per subdomain column, crossing only faces.

    Each bar runs the full length of the box along ``axis`` and sits in the
    middle half of its subdomain column, so it never touches an edge or corner.
    """
    counts = list(subdomains_per_axis)
    lo = max(1, h_ratio // 4)
    hi = h_ratio - lo
    if hi <= lo:
        raise ValueError("bars need at least 3 elements per subdomain edge")
    others = [a for a in range(3) if a != axis]
    boxes = []
    for p in range(counts[others[0]]):
        for q in range(counts[others[1]]):
            box = [0, 0, 0, 0, 0, 0]
            box[2 * axis], box[2 * axis + 1] = 0, counts[axis] * h_ratio
            for a, c in zip(others, (p, q)):
                box[2 * a], box[2 * a + 1] = c * h_ratio + lo, c * h_ratio + hi
            boxes.append(tuple(box))
    return boxes


def _shape_gradients(xi, eta, zeta):
    r = HEX_REF
    n = 0.125 * (1 + r[:, 0] * xi) * (1 + r[:, 1] * eta) * (1 + r[:, 2] * zeta)
    dn = 0.125 * np.column_stack([
        r[:, 0] * (1 + r[:, 1] * eta) * (1 + r[:, 2] * zeta),
        r[:, 1] * (1 + r[:, 0] * xi) * (1 + r[:, 2] * zeta),
        r[:, 2] * (1 + r[:, 0] * xi) * (1 + r[:, 1] * eta),
    ])
    return n, dn


def element_stiffness(xyz, material, physics):
    """Trilinear hexahedron stiffness by 2x2x2 Gauss quadrature."""
    xyz = np.asarray(xyz, dtype=float)
    ndof = 8 * PHYSICS_DOFS[physics]
    ke = np.zeros((ndof, ndof))
    if physics == "elasticity":
        d = material.elasticity_matrix()
    for xi in GAUSS_1D:
        for eta in GAUSS_1D:
            for zeta in GAUSS_1D:
                _, dn = _shape_gradients(xi, eta, zeta)
                jac = dn.T @ xyz
                det = np.linalg.det(jac)
                if det <= 0:
                    raise DegenerateElement(f"nonpositive Jacobian {det:.3e}")
                g = np.linalg.solve(jac, dn.T)        # (3, 8) physical gradients
                if physics == "scalar":
                    ke += material.conductivity * det * (g.T @ g)
                else:
                    b = np.zeros((6, 24))
                    b[0, 0::3] = g[0]
                    b[1, 1::3] = g[1]
                    b[2, 2::3] = g[2]
                    b[3, 0::3], b[3, 1::3] = g[1], g[0]
                    b[4, 1::3], b[4, 2::3] = g[2], g[1]
                    b[5, 0::3], b[5, 2::3] = g[2], g[0]
                    ke += det * (b.T @ d @ b)
    return 0.5 * (ke + ke.T)


@lru_cache(maxsize=256)
def _cached_stiffness(rel_key, material, physics):
    return element_stiffness(np.array(rel_key).reshape(8, 3), material, physics)


def _element_matrix(mesh, e, materials):
    xyz = mesh.coords[mesh.elements[e]]
    rel = np.round(xyz - xyz[0], 12)
    mat = materials[int(mesh.material[e])]
    return _cached_stiffness(tuple(rel.ravel()), mat, mesh.physics)


def rigid_body_modes(coords, physics):
    """Zero-energy modes over the given nodes, one column per mode.

    A constant for the scalar problem; three translations and three
    rotations about the centroid for elasticity (node-major dof order).
    """
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    n = len(coords)
    if physics == "scalar":
        return np.ones((n, 1))
    x = coords - coords.mean(axis=0)
    modes = np.zeros((n, 3, 6))
    for k in range(3):
        modes[:, k, k] = 1.0
    # rotations: e_a x (x - x0)
    modes[:, 1, 3], modes[:, 2, 3] = -x[:, 2], x[:, 1]
    modes[:, 0, 4], modes[:, 2, 4] = x[:, 2], -x[:, 0]
    modes[:, 0, 5], modes[:, 1, 5] = -x[:, 1], x[:, 0]
    return modes.reshape(3 * n, 6)


def face_load(mesh, face, value):
    """Consistent nodal loads for a uniform traction (or flux) on a box face."""
    axis, _ = FACE_AXES[face]
    value = np.broadcast_to(np.asarray(value, dtype=float), (mesh.dofs_per_node,))
    on_face = np.zeros(mesh.n_nodes, dtype=bool)
    on_face[mesh.face_nodes(face)] = True
    f = np.zeros(mesh.n_dofs)
    tang = [a for a in range(3) if a != axis]
    for e in np.flatnonzero(on_face[mesh.elements].sum(axis=1) == 4):
        nodes = mesh.elements[e][on_face[mesh.elements[e]]]
        xyz = mesh.coords[nodes]
        # order the four face nodes counter-clockwise in the tangential plane
        c = xyz[:, tang] - xyz[:, tang].mean(axis=0)
        nodes = nodes[np.argsort(np.arctan2(c[:, 1], c[:, 0]))]
        quad = mesh.coords[nodes][:, tang]
        ref = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=float)
        for s in GAUSS_1D:
            for t in GAUSS_1D:
                n = 0.25 * (1 + ref[:, 0] * s) * (1 + ref[:, 1] * t)
                dn = 0.25 * np.column_stack([ref[:, 0] * (1 + ref[:, 1] * t),
                                             ref[:, 1] * (1 + ref[:, 0] * s)])
                area = abs(np.linalg.det(dn.T @ quad))
                for a, node in enumerate(nodes):
                    f[mesh.node_dofs([node])] += n[a] * area * value
    return f


@dataclass
class SubdomainSystem:
    """Local stiffness ``A_i`` on the subdomain's free dofs.

    ``dofs`` holds global dof ids in increasing order; ``interior`` and
    ``interface`` are positions into ``dofs``.
    """

    index: int
    dofs: np.ndarray
    A: sp.csr_matrix
    f: np.ndarray
    interior: np.ndarray
    interface: np.ndarray

    @property
    def size(self):
        return len(self.dofs)


def assemble_subdomain(mesh, decomposition, materials, subdomain_id, load=None):
    """Subassemble element matrices of one subdomain (all node dofs, no BCs yet).

    ``load`` is an optional global load vector; each subdomain receives the
    part coming from its own elements' faces, see ``split_load``.
    """
    if not 0 <= subdomain_id < decomposition.n_subdomains:
        raise ValueError(f"invalid subdomain id {subdomain_id}")
    d = mesh.dofs_per_node
    elems = decomposition.subdomain_elements(subdomain_id)
    nodes = np.unique(mesh.elements[elems])
    dofs = mesh.node_dofs(nodes)
    local_node = np.full(mesh.n_nodes, -1, dtype=np.int64)
    local_node[nodes] = np.arange(len(nodes))
    rows, cols, vals = [], [], []
    for e in elems:
        ke = _element_matrix(mesh, e, materials)
        ld = (local_node[mesh.elements[e]][:, None] * d + np.arange(d)).ravel()
        r, c = np.meshgrid(ld, ld, indexing="ij")
        upper = r <= c
        rows.append(r[upper])
        cols.append(c[upper])
        vals.append(ke[upper])
    a = sym_from_triplets(len(dofs), np.concatenate(rows), np.concatenate(cols), np.concatenate(vals))
    shared = np.array([len(decomposition.node_subdomains[n]) > 1 for n in nodes])
    shared = np.repeat(shared, d)
    f = np.zeros(len(dofs)) if load is None else np.asarray(load, dtype=float)[dofs]
    return SubdomainSystem(subdomain_id, dofs, a, f,
                           np.flatnonzero(~shared), np.flatnonzero(shared))


def split_load(mesh, decomposition, load):
    """Distribute a global nodal load so that the subdomain loads sum to it.

    Each shared node's load is divided equally among the subdomains sharing it.
    """
    mult = np.array([len(s) for s in decomposition.node_subdomains], dtype=float)
    return np.asarray(load, dtype=float) / np.repeat(mult, mesh.dofs_per_node)


def assemble_global(mesh, materials):
    """Directly assembled global stiffness over all node dofs."""
    d = mesh.dofs_per_node
    rows, cols, vals = [], [], []
    for e in range(len(mesh.elements)):
        ke = _element_matrix(mesh, e, materials)
        gd = mesh.node_dofs(mesh.elements[e])
        r, c = np.meshgrid(gd, gd, indexing="ij")
        upper = r <= c
        rows.append(r[upper])
        cols.append(c[upper])
        vals.append(ke[upper])
    return sym_from_triplets(mesh.n_nodes * d, np.concatenate(rows), np.concatenate(cols),
                             np.concatenate(vals))


def dirichlet_mask(mesh, boundary_spec):
    """Boolean mask of fixed global dofs.

    ``boundary_spec`` is a list of ``(face, components)`` where components is
    ``None`` for all components of the physics.
    """
    fixed = np.zeros(mesh.n_dofs, dtype=bool)
    d = mesh.dofs_per_node
    for face, comps in boundary_spec:
        nodes = mesh.face_nodes(face)
        comps = range(d) if comps is None else comps
        for c in comps:
            fixed[nodes * d + c] = True
    return fixed


def apply_dirichlet(systems, fixed):
    """Eliminate fixed dofs (homogeneous data) from every subdomain system."""
    out = []
    for s in systems:
        keep = ~fixed[s.dofs]
        idx = np.flatnonzero(keep)
        newpos = np.full(s.size, -1, dtype=np.int64)
        newpos[idx] = np.arange(len(idx))
        a = s.A[idx][:, idx].tocsr()
        interior = newpos[s.interior[keep[s.interior]]]
        interface = newpos[s.interface[keep[s.interface]]]
        out.append(SubdomainSystem(s.index, s.dofs[idx], a, s.f[idx], interior, interface))
    return out


@dataclass
class Problem:
    """Everything needed to set up the substructured linear system."""

    mesh: Mesh
    decomposition: Decomposition
    materials: dict
    dirichlet: list = field(default_factory=list)
    loads: list = field(default_factory=list)     # (face, value)

    @property
    def physics(self):
        return self.mesh.physics

    def fixed_dofs(self):
        return dirichlet_mask(self.mesh, self.dirichlet)

    def load_vector(self):
        f = np.zeros(self.mesh.n_dofs)
        for face, value in self.loads:
            f += face_load(self.mesh, face, value)
        return f

    def systems(self):
        load = split_load(self.mesh, self.decomposition, self.load_vector())
        systems = [assemble_subdomain(self.mesh, self.decomposition, self.materials, i, load)
                   for i in range(self.decomposition.n_subdomains)]
        return apply_dirichlet(systems, self.fixed_dofs())


def cube_problem(subdomains_per_axis, h_ratio, physics="elasticity", materials=None,
                 dirichlet=(("xmin", None),), loads=(("xmax", None),), bars=None):
    """Convenience constructor for the structured benchmark problems.

    A load value of ``None`` means a unit load: unit flux for the scalar
    problem, unit traction in ``-z`` for elasticity. ``bars`` is a list of
    ``(box, material_id)`` element boxes.
    """
    mesh, dec = build_cube_mesh(subdomains_per_axis, h_ratio, physics)
    materials = dict(materials or DEFAULT_MATERIALS[physics])
    for box, mid in bars or ():
        assign_material_box(mesh, box, mid)
    unit = 1.0 if physics == "scalar" else (0.0, 0.0, -1.0)
    loads = [(face, unit if value is None else value) for face, value in loads]
    return Problem(mesh, dec, materials, list(dirichlet), loads)


def _floats(text):
    return [float(t) for t in text.replace(",", " ").split()]


def parse_problem(config):
    """Build a :class:`Problem` from a ``configparser`` object.

    Sections: ``[mesh]`` (subdomains, h_ratio, physics), ``[material.<id>]``
    (conductivity or young/poisson), ``[bars]`` (material, axis), ``[region.<name>]``
    (material, boxes as ``x0 x1 y0 y1 z0 z1`` separated by ``;``), ``[dirichlet]``
    (faces, components), ``[load]`` (faces, value).
    """
    m = config["mesh"]
    counts = tuple(int(v) for v in m.get("subdomains", "2 2 2").split())
    h_ratio = m.getint("h_ratio", 4)
    physics = m.get("physics", "elasticity")
    mesh, dec = build_cube_mesh(counts, h_ratio, physics)
    materials = dict(DEFAULT_MATERIALS[physics])
    for name in config.sections():
        if name.startswith("material."):
            sec = config[name]
            mid = int(name.split(".", 1)[1])
            if "conductivity" in sec:
                materials[mid] = Material(conductivity=sec.getfloat("conductivity"))
            else:
                materials[mid] = Material(young=sec.getfloat("young"), poisson=sec.getfloat("poisson"))
    if config.has_section("bars"):
        sec = config["bars"]
        for box in composite_bar_boxes(counts, h_ratio, axis=sec.getint("axis", 2)):
            assign_material_box(mesh, box, sec.getint("material", 1))
    for name in config.sections():
        if name.startswith("region."):
            sec = config[name]
            for chunk in sec["boxes"].split(";"):
                if chunk.strip():
                    assign_material_box(mesh, tuple(int(v) for v in chunk.split()), sec.getint("material"))
    missing = set(np.unique(mesh.material).tolist()) - set(materials)
    if missing:
        raise ValueError(f"materials {sorted(missing)} used but not defined")
    dirichlet = []
    if config.has_section("dirichlet"):
        sec = config["dirichlet"]
        comps = sec.get("components")
        comps = None if comps in (None, "all") else [int(c) for c in comps.split()]
        dirichlet = [(face, comps) for face in sec.get("faces", "").split()]
    loads = []
    if config.has_section("load"):
        sec = config["load"]
        value = _floats(sec["value"]) if "value" in sec else None
        if value is None:
            value = [1.0] if physics == "scalar" else [0.0, 0.0, -1.0]
        for face in sec.get("faces", "").split():
            loads.append((face, value if len(value) > 1 else value[0]))
    for face, _ in dirichlet + loads:
        if face not in FACE_AXES:
            raise ValueError(f"unknown face {face!r}")
    return Problem(mesh, dec, materials, dirichlet, loads)


def read_problem(path):
    config = configparser.ConfigParser()
    with open(path) as fh:
        config.read_file(fh)
    return parse_problem(config)


def write_vtk(path, mesh, decomposition=None):
    """Legacy ASCII VTK unstructured grid with material and subdomain cell data."""
    lines = ["# vtk DataFile Version 3.0", "adaptive_bddc mesh", "ASCII",
             "DATASET UNSTRUCTURED_GRID", f"POINTS {mesh.n_nodes} double"]
    lines += [" ".join(f"{v:.9g}" for v in p) for p in mesh.coords]
    ne = len(mesh.elements)
    lines.append(f"CELLS {ne} {9 * ne}")
    lines += ["8 " + " ".join(map(str, e)) for e in mesh.elements]
    lines.append(f"CELL_TYPES {ne}")
    lines += ["12"] * ne
    lines += [f"CELL_DATA {ne}", "SCALARS material int 1", "LOOKUP_TABLE default"]
    lines += [str(int(m)) for m in mesh.material]
    if decomposition is not None:
        lines += ["SCALARS subdomain int 1", "LOOKUP_TABLE default"]
        lines += [str(int(s)) for s in decomposition.element_subdomain]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
