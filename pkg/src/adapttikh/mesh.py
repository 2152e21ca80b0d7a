"""Conforming triangulations of polygonal 2D domains.

Triangles are stored counterclockwise with the refinement edge opposite the
first local vertex, i.e. the edge ``(t[1], t[2])`` is bisected first.  Local
edge ``k`` is always the edge opposite local vertex ``k``.  This single
convention drives newest-vertex bisection and the edge bookkeeping below.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import InvalidArgument

__all__ = [
    "SubdomainMask",
    "Mesh",
    "make_disk_mesh",
    "refine",
    "uniform_refine",
    "prolong",
    "edge_jump_normal_gradient",
    "read_mesh",
    "write_mesh",
]

# local edge k = (vertex _EDGE_LOCAL[k, 0], vertex _EDGE_LOCAL[k, 1])
_EDGE_LOCAL = np.array([[1, 2], [2, 0], [0, 1]])


@dataclass(frozen=True)
class SubdomainMask:
    """Elementwise flags for the control region and the observation region."""

    in_omega_c: np.ndarray
    in_omega_o: np.ndarray

    @classmethod
    def full(cls, n_triangles):
        ones = np.ones(n_triangles, dtype=bool)
        return cls(ones, ones.copy())

    def take(self, parent):
        """Flags of children given the child -> parent map."""
        return SubdomainMask(self.in_omega_c[parent], self.in_omega_o[parent])


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable conforming triangulation.

    Parameters
    ----------
    vertices : (nv, 2) float array
    triangles : (nt, 3) int array, counterclockwise, refinement edge opposite
        local vertex 0
    boundary : (nv,) bool array of boundary-vertex flags
    mask : SubdomainMask
    parent : (nt,) int array mapping each triangle to the triangle of the
        previous mesh it was cut from, or ``None`` for a root mesh
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary: np.ndarray
    mask: SubdomainMask = None
    parent: np.ndarray | None = field(default=None, repr=False)
    # blocks of (k, 2) edge endpoints for vertices appended by refinement
    midpoints: tuple = field(default=(), repr=False)

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=float)
        t = np.ascontiguousarray(self.triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 2:
            raise InvalidArgument("vertices must have shape (nv, 2)")
        if t.ndim != 2 or t.shape[1] != 3:
            raise InvalidArgument("triangles must have shape (nt, 3)")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise InvalidArgument("triangle references unknown vertex")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        object.__setattr__(self, "boundary", np.asarray(self.boundary, dtype=bool))
        if self.mask is None:
            object.__setattr__(self, "mask", SubdomainMask.full(len(t)))
        for arr in (v, t, self.boundary, self.mask.in_omega_c, self.mask.in_omega_o):
            arr.setflags(write=False)

    # -- sizes ---------------------------------------------------------------

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    @property
    def refinement_edge(self):
        """Local index of each triangle's refinement edge (always 0 here)."""
        return np.zeros(self.n_triangles, dtype=np.int64)

    def with_mask(self, mask):
        return Mesh(self.vertices, self.triangles, self.boundary, mask, self.parent,
                    self.midpoints)

    # -- geometry ------------------------------------------------------------

    @cached_property
    def corners(self):
        """(nt, 3, 2) coordinates of triangle corners."""
        return self.vertices[self.triangles]

    @cached_property
    def signed_area(self):
        p = self.corners
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @property
    def area(self):
        return np.abs(self.signed_area)

    @cached_property
    def local_edge_lengths(self):
        """(nt, 3) length of the edge opposite each local vertex."""
        p = self.corners
        d = p[:, _EDGE_LOCAL[:, 1]] - p[:, _EDGE_LOCAL[:, 0]]
        return np.hypot(d[..., 0], d[..., 1])

    @cached_property
    def h(self):
        """Element diameters (longest edge)."""
        return self.local_edge_lengths.max(axis=1)

    @cached_property
    def angles(self):
        """(nt, 3) interior angle at each local vertex."""
        ell = self.local_edge_lengths
        a, b, c = ell[:, 0], ell[:, 1], ell[:, 2]
        cos0 = (b**2 + c**2 - a**2) / (2 * b * c)
        cos1 = (c**2 + a**2 - b**2) / (2 * c * a)
        cos2 = (a**2 + b**2 - c**2) / (2 * a * b)
        return np.arccos(np.clip(np.stack([cos0, cos1, cos2], axis=1), -1.0, 1.0))

    @property
    def min_angle(self):
        return float(self.angles.min())

    @cached_property
    def gradients(self):
        """(nt, 3, 2) constant gradients of the three local hat functions."""
        p = self.corners
        two_area = 2.0 * self.signed_area
        # grad phi_k = rot90(edge opposite k) / (2|K|), oriented inward
        e = p[:, _EDGE_LOCAL[:, 1]] - p[:, _EDGE_LOCAL[:, 0]]
        g = np.stack([-e[..., 1], e[..., 0]], axis=-1)
        return g / two_area[:, None, None]

    # -- topology ------------------------------------------------------------

    @cached_property
    def _edge_data(self):
        t = self.triangles
        pairs = np.sort(t[:, _EDGE_LOCAL].reshape(-1, 2), axis=1)
        edges, inverse = np.unique(pairs, axis=0, return_inverse=True)
        t2e = inverse.reshape(-1, 3)
        e2t = np.full((len(edges), 2), -1, dtype=np.int64)
        flat_t = np.repeat(np.arange(len(t)), 3)
        flat_e = t2e.ravel()
        order = np.lexsort((flat_t, flat_e))
        fe, ft = flat_e[order], flat_t[order]
        first = np.ones(len(fe), dtype=bool)
        first[1:] = fe[1:] != fe[:-1]
        e2t[fe[first], 0] = ft[first]
        second = ~first
        if np.any(np.bincount(fe, minlength=len(edges)) > 2):
            raise InvalidArgument("non-manifold edge: more than two triangles share it")
        e2t[fe[second], 1] = ft[second]
        return edges, t2e, e2t

    @property
    def edges(self):
        """(ne, 2) sorted vertex pairs."""
        return self._edge_data[0]

    @property
    def triangle_edges(self):
        """(nt, 3) edge index of local edge k (opposite local vertex k)."""
        return self._edge_data[1]

    @property
    def edge_triangles(self):
        """(ne, 2) adjacent triangles, lower index first, -1 where absent."""
        return self._edge_data[2]

    @cached_property
    def boundary_edges(self):
        return self.edge_triangles[:, 1] < 0

    @cached_property
    def edge_lengths(self):
        d = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])

    @cached_property
    def free_vertices(self):
        return np.flatnonzero(~self.boundary)

    def check(self):
        """Raise InvalidArgument unless the mesh is valid and conforming."""
        if np.any(self.signed_area <= 0):
            raise InvalidArgument("triangle with nonpositive (or clockwise) area")
        counts = np.bincount(self.triangle_edges.ravel(), minlength=len(self.edges))
        if np.any(counts > 2):
            raise InvalidArgument("edge shared by more than two triangles")
        # a hanging node sits in the interior of a boundary-flagged edge
        bnd_from_topology = np.zeros(self.n_vertices, dtype=bool)
        bnd_from_topology[self.edges[self.boundary_edges].ravel()] = True
        if not np.array_equal(bnd_from_topology, self.boundary):
            raise InvalidArgument("boundary flags disagree with topology (hanging node?)")
        return True


# -- construction -------------------------------------------------------------


def make_disk_mesh(n_boundary, radius=1.0, levels=0):
    """Fan triangulation of the inscribed regular ``n_boundary``-gon.

    The fan is centred at the origin; each triangle's refinement edge is its
    boundary chord, so every uniform level is exactly two rounds of
    newest-vertex bisection (element count times four).
    """
    if int(n_boundary) != n_boundary or n_boundary < 3:
        raise InvalidArgument(f"n_boundary must be an integer >= 3, got {n_boundary}")
    if radius <= 0:
        raise InvalidArgument("radius must be positive")
    if levels < 0:
        raise InvalidArgument("levels must be nonnegative")
    n = int(n_boundary)
    phi = 2 * np.pi * np.arange(n) / n
    ring = radius * np.column_stack([np.cos(phi), np.sin(phi)])
    vertices = np.vstack([[0.0, 0.0], ring])
    i = np.arange(n)
    triangles = np.column_stack([np.zeros(n, dtype=np.int64), 1 + i, 1 + (i + 1) % n])
    boundary = np.ones(n + 1, dtype=bool)
    boundary[0] = False
    mesh = Mesh(vertices, triangles, boundary)
    for _ in range(levels):
        mesh = uniform_refine(mesh)
    return mesh


def uniform_refine(mesh):
    """Two rounds of bisection of every element (halves h)."""
    mesh2 = refine(mesh, np.arange(mesh.n_triangles))
    mesh4 = refine(mesh2, np.arange(mesh2.n_triangles))
    return Mesh(mesh4.vertices, mesh4.triangles, mesh4.boundary, mesh4.mask,
                mesh2.parent[mesh4.parent], mesh2.midpoints + mesh4.midpoints)


def refine(mesh, marked):
    """Newest-vertex bisection of the marked triangles plus conforming closure.

    Returns a new mesh whose ``parent`` array maps each child to its triangle
    in ``mesh``.  Children of a parent are contiguous and parents keep their
    relative order.
    """
    marked = np.unique(np.asarray(list(marked) if isinstance(marked, (set, frozenset))
                                  else marked, dtype=np.int64).ravel())
    if marked.size and (marked.min() < 0 or marked.max() >= mesh.n_triangles):
        raise InvalidArgument("marked set contains unknown triangle ids")
    nt = mesh.n_triangles
    if marked.size == 0:
        return Mesh(mesh.vertices, mesh.triangles, mesh.boundary, mesh.mask,
                    np.arange(nt))

    t2e = mesh.triangle_edges
    edge_marked = np.zeros(len(mesh.edges), dtype=bool)
    edge_marked[t2e[marked, 0]] = True
    while True:
        touched = edge_marked[t2e].any(axis=1)
        missing = touched & ~edge_marked[t2e[:, 0]]
        if not missing.any():
            break
        edge_marked[t2e[missing, 0]] = True

    split = np.flatnonzero(edge_marked)
    midpoint = np.full(len(mesh.edges), -1, dtype=np.int64)
    midpoint[split] = mesh.n_vertices + np.arange(len(split))
    ends = mesh.edges[split]
    new_xy = 0.5 * (mesh.vertices[ends[:, 0]] + mesh.vertices[ends[:, 1]])
    vertices = np.vstack([mesh.vertices, new_xy])
    boundary = np.concatenate([mesh.boundary, mesh.boundary_edges[split]])

    t = mesh.triangles
    a, b, c = t[:, 0], t[:, 1], t[:, 2]
    m0, m1, m2 = (midpoint[t2e[:, k]] for k in range(3))
    has0, has1, has2 = m0 >= 0, m1 >= 0, m2 >= 0

    children = []  # (parent ids, child slot, triangles)

    def emit(sel, slot, tri):
        idx = np.flatnonzero(sel)
        if idx.size:
            children.append((idx, np.full(idx.size, slot), np.column_stack(tri)[idx]))

    emit(~has0, 0, (a, b, c))
    # left child (m0, a, b) has refinement edge (a, b) = local edge 2
    emit(has0 & ~has2, 0, (m0, a, b))
    emit(has0 & has2, 0, (m2, m0, a))
    emit(has0 & has2, 1, (m2, b, m0))
    # right child (m0, c, a) has refinement edge (c, a) = local edge 1
    emit(has0 & ~has1, 2, (m0, c, a))
    emit(has0 & has1, 2, (m1, m0, c))
    emit(has0 & has1, 3, (m1, a, m0))

    parent = np.concatenate([p for p, _, _ in children])
    slot = np.concatenate([s for _, s, _ in children])
    tris = np.vstack([tri for _, _, tri in children])
    order = np.lexsort((slot, parent))
    parent = parent[order]
    return Mesh(vertices, tris[order], boundary, mesh.mask.take(parent), parent, (ends,))


def prolong(fine, values):
    """Nodal injection of P1 coefficients from the parent mesh of ``fine``.

    Exact for nested P1 spaces: each appended vertex gets the mean of the
    endpoints of the edge it bisected.
    """
    out = np.asarray(values, dtype=float)
    for ends in fine.midpoints:
        out = np.concatenate([out, 0.5 * (out[ends[:, 0]] + out[ends[:, 1]])])
    if len(out) != fine.n_vertices:
        raise InvalidArgument("values do not belong to the parent mesh of `fine`")
    return out


def _orient_for_bisection(vertices, triangles):
    """Make triangles counterclockwise with the longest edge opposite vertex 0."""
    t = np.array(triangles, dtype=np.int64)
    p = vertices[t]
    cross = ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
             - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0]))
    cw = cross < 0
    t[cw] = t[cw][:, [0, 2, 1]]
    p = vertices[t]
    d = p[:, _EDGE_LOCAL[:, 1]] - p[:, _EDGE_LOCAL[:, 0]]
    longest = np.argmax(np.hypot(d[..., 0], d[..., 1]), axis=1)
    shift = np.arange(3)[None, :] + longest[:, None]
    return np.take_along_axis(t, shift % 3, axis=1)


# -- P1 gradient jumps --------------------------------------------------------


def element_gradients(mesh, coefficients):
    """(nt, 2) gradient of a P1 function on each triangle."""
    c = np.asarray(coefficients, dtype=float)[mesh.triangles]
    return np.einsum("tk,tkd->td", c, mesh.gradients)


def edge_outward_normals(mesh):
    """(ne, 2) unit normal of each edge, outward from its lower-indexed triangle."""
    e = mesh.edges
    d = mesh.vertices[e[:, 1]] - mesh.vertices[e[:, 0]]
    n = np.column_stack([d[:, 1], -d[:, 0]]) / mesh.edge_lengths[:, None]
    owner = mesh.edge_triangles[:, 0]
    centroid = mesh.corners[owner].mean(axis=1)
    mid = 0.5 * (mesh.vertices[e[:, 0]] + mesh.vertices[e[:, 1]])
    flip = np.einsum("ed,ed->e", n, mid - centroid) < 0
    n[flip] *= -1
    return n


def edge_jumps(mesh, coefficients):
    """Jump of the normal derivative on every edge (0 on boundary edges).

    Sign convention: ``(grad f|T1 - grad f|T2) . nu1`` with ``T1`` the
    lower-indexed neighbour and ``nu1`` its outward normal.
    """
    g = element_gradients(mesh, coefficients)
    et = mesh.edge_triangles
    interior = et[:, 1] >= 0
    jump = np.zeros(len(et))
    nu = edge_outward_normals(mesh)
    diff = g[et[interior, 0]] - g[et[interior, 1]]
    jump[interior] = np.einsum("ed,ed->e", diff, nu[interior])
    return jump


def edge_jump_normal_gradient(f, edge):
    """Jump of the normal derivative of the P1 function ``f`` across ``edge``.

    ``edge`` is an edge index of ``f.mesh``.  Boundary edges return 0.
    """
    mesh = f.mesh
    edge = int(edge)
    if not 0 <= edge < len(mesh.edges):
        raise InvalidArgument(f"unknown edge {edge}")
    t1, t2 = mesh.edge_triangles[edge]
    if t2 < 0:
        return 0.0
    g = element_gradients(mesh, f.coefficients)
    nu = edge_outward_normals(mesh)[edge]
    return float((g[t1] - g[t2]) @ nu)


# -- text format --------------------------------------------------------------


def write_mesh(mesh, path):
    """Write ``nv nt`` / ``x y boundary`` / ``i j k in_c in_o`` lines."""
    lines = [f"{mesh.n_vertices} {mesh.n_triangles}"]
    for (x, y), b in zip(mesh.vertices, mesh.boundary):
        lines.append(f"{x:.17g} {y:.17g} {int(b)}")
    for (i, j, k), c, o in zip(mesh.triangles, mesh.mask.in_omega_c, mesh.mask.in_omega_o):
        lines.append(f"{i} {j} {k} {int(c)} {int(o)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_mesh(path):
    """Inverse of :func:`write_mesh`.

    Vertex order within each triangle is kept when the file already follows
    the counterclockwise / refinement-edge convention; otherwise triangles are
    reoriented with the longest edge as refinement edge.
    """
    rows = Path(path).read_text(encoding="utf-8").split("\n")
    rows = [r for r in rows if r.strip()]
    try:
        nv, nt = (int(s) for s in rows[0].split())
        vrows = [r.split() for r in rows[1:1 + nv]]
        trows = [r.split() for r in rows[1 + nv:1 + nv + nt]]
        vertices = np.array([[float(x), float(y)] for x, y, _ in vrows])
        boundary = np.array([bool(int(b)) for _, _, b in vrows])
        tri = np.array([[int(i), int(j), int(k)] for i, j, k, _, _ in trows], dtype=np.int64)
        in_c = np.array([bool(int(r[3])) for r in trows])
        in_o = np.array([bool(int(r[4])) for r in trows])
    except (ValueError, IndexError) as exc:
        raise InvalidArgument(f"malformed mesh file {path}: {exc}") from exc
    if len(vertices) != nv or len(tri) != nt:
        raise InvalidArgument(f"malformed mesh file {path}: counts do not match header")
    p = vertices[tri]
    cross = ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
             - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0]))
    if np.any(cross < 0):
        tri = _orient_for_bisection(vertices, tri)
    return Mesh(vertices, tri, boundary, SubdomainMask(in_c, in_o))
