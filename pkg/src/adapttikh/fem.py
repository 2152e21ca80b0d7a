"""P1 finite elements with homogeneous Dirichlet conditions."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import InvalidArgument, NumericalFailure

__all__ = [
    "FeFunction",
    "SparseOperator",
    "P1Space",
    "assemble",
    "solve_poisson",
    "measure_load",
    "local_stiffness",
    "local_mass",
    "interpolate",
    "load_vector",
]

_MASS_PATTERN = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0


@dataclass(frozen=True, eq=False)
class FeFunction:
    """Continuous piecewise-linear function given by its nodal values."""

    mesh: object
    coefficients: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coefficients, dtype=float)
        if c.shape != (self.mesh.n_vertices,):
            raise InvalidArgument(
                f"expected {self.mesh.n_vertices} coefficients, got shape {c.shape}")
        object.__setattr__(self, "coefficients", c)

    def __add__(self, other):
        return FeFunction(self.mesh, self.coefficients + other.coefficients)

    def __sub__(self, other):
        return FeFunction(self.mesh, self.coefficients - other.coefficients)

    def __mul__(self, scalar):
        return FeFunction(self.mesh, scalar * self.coefficients)

    __rmul__ = __mul__


@dataclass(frozen=True, eq=False)
class SparseOperator:
    """Assembled matrix together with the vertex indices its rows refer to.

    ``kind`` is ``"stiffness"`` (rows = free vertices, Dirichlet rows and
    columns eliminated), ``"mass"`` or ``"observation-mass"`` (rows = all
    vertices, since data need not vanish on the boundary).
    """

    matrix: sp.csr_matrix
    kind: str
    dofs: np.ndarray


def local_stiffness(mesh):
    """(nt, 3, 3) exact P1 element stiffness matrices."""
    g = mesh.gradients
    return mesh.area[:, None, None] * np.einsum("tid,tjd->tij", g, g)


def local_mass(mesh):
    """(nt, 3, 3) exact P1 element mass matrices."""
    return mesh.area[:, None, None] * _MASS_PATTERN[None]


def _scatter(mesh, local, weights=None):
    t = mesh.triangles
    if weights is not None:
        local = local * weights[:, None, None]
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    n = mesh.n_vertices
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(n, n))


def assemble(mesh, kind):
    """Assemble the stiffness, mass or observation-mass operator of ``mesh``."""
    if np.any(mesh.signed_area <= 0):
        raise InvalidArgument("cannot assemble on a degenerate or clockwise triangle")
    if kind == "stiffness":
        full = _scatter(mesh, local_stiffness(mesh))
        free = mesh.free_vertices
        return SparseOperator(full[free][:, free].tocsr(), kind, free)
    if kind == "mass":
        return SparseOperator(_scatter(mesh, local_mass(mesh)), kind,
                              np.arange(mesh.n_vertices))
    if kind == "observation-mass":
        w = mesh.mask.in_omega_o.astype(float)
        return SparseOperator(_scatter(mesh, local_mass(mesh), w), kind,
                              np.arange(mesh.n_vertices))
    if kind == "control-mass":
        w = mesh.mask.in_omega_c.astype(float)
        return SparseOperator(_scatter(mesh, local_mass(mesh), w), kind,
                              np.arange(mesh.n_vertices))
    raise InvalidArgument(f"unknown operator kind {kind!r}")


class P1Space:
    """P1 space on one mesh with cached matrices and a stiffness factorization.

    All Poisson solves of the Tikhonov solvers go through :meth:`solve`, so the
    sparse LU factor of the stiffness matrix is computed once per mesh.
    """

    def __init__(self, mesh):
        self.mesh = mesh
        self.free = mesh.free_vertices
        self.n = mesh.n_vertices

    @cached_property
    def stiffness(self):
        return assemble(self.mesh, "stiffness").matrix

    @cached_property
    def mass(self):
        return assemble(self.mesh, "mass").matrix

    @cached_property
    def obs_mass(self):
        return assemble(self.mesh, "observation-mass").matrix

    @cached_property
    def ctrl_mass(self):
        return assemble(self.mesh, "control-mass").matrix

    @cached_property
    def control_vertices(self):
        """Vertices of elements in the control region (nodes of P1 controls)."""
        t = self.mesh.triangles[self.mesh.mask.in_omega_c]
        return np.unique(t)

    @cached_property
    def atom_vertices(self):
        """Interior vertices of the closed control region (Dirac locations)."""
        ctrl = np.zeros(self.n, dtype=bool)
        ctrl[self.control_vertices] = True
        return np.flatnonzero(ctrl & ~self.mesh.boundary)

    @cached_property
    def _lu(self):
        if len(self.free) == 0:
            return None
        return splu(self.stiffness.tocsc(), permc_spec="MMD_AT_PLUS_A",
                    options={"SymmetricMode": True})

    def solve(self, rhs_free):
        """Galerkin solution for a load vector indexed over free vertices."""
        rhs_free = np.asarray(rhs_free, dtype=float)
        if rhs_free.shape != (len(self.free),):
            raise InvalidArgument(
                f"load vector must have length {len(self.free)}, got {rhs_free.shape}")
        out = np.zeros(self.n)
        if self._lu is None:
            return out
        x = self._lu.solve(rhs_free)
        if not np.all(np.isfinite(x)):
            raise NumericalFailure("sparse LU produced non-finite values")
        out[self.free] = x
        return out

    def solve_full(self, rhs_full):
        """As :meth:`solve` but with a load vector over all vertices."""
        return self.solve(np.asarray(rhs_full, dtype=float)[self.free])

    def obs_inner(self, a, b):
        return float(a @ (self.obs_mass @ b))

    def obs_norm(self, a):
        return float(np.sqrt(max(self.obs_inner(a, a), 0.0)))

    def l2_norm(self, a):
        return float(np.sqrt(max(a @ (self.mass @ a), 0.0)))

    def energy(self, a, b):
        """Stiffness bilinear form of two full coefficient vectors."""
        return float(a[self.free] @ (self.stiffness @ b[self.free]))


def solve_poisson(mesh, rhs, space=None):
    """Solve ``-Laplace y = f`` with ``y = 0`` on the boundary.

    ``rhs`` is the load vector over the free vertices of ``mesh``.  Returns an
    :class:`FeFunction` with zero boundary values.
    """
    space = space or P1Space(mesh)
    y = space.solve(rhs)
    # residual check against the energy-norm contract
    r = space.stiffness @ y[space.free] - np.asarray(rhs, dtype=float)
    scale = max(np.linalg.norm(rhs), np.finfo(float).tiny)
    if np.linalg.norm(r) > 1e-10 * scale and np.linalg.norm(rhs) > 0:
        raise NumericalFailure("Poisson solve residual above tolerance",
                               residual=float(np.linalg.norm(r) / scale))
    return FeFunction(mesh, y)


def measure_load(u, mesh):
    """Load vector (over free vertices) of a discrete measure ``sum u_j delta_{x_j}``."""
    idx = np.asarray(u.vertices, dtype=np.int64)
    if np.any(mesh.boundary[idx]):
        raise InvalidArgument("Dirac atoms must sit on interior vertices")
    full = np.zeros(mesh.n_vertices)
    np.add.at(full, idx, u.coefficients)
    return full[mesh.free_vertices]


# degree-4 rule on the reference triangle (Dunavant, 6 points)
_Q4_BARY = np.array([
    [0.108103018168070, 0.445948490915965, 0.445948490915965],
    [0.445948490915965, 0.108103018168070, 0.445948490915965],
    [0.445948490915965, 0.445948490915965, 0.108103018168070],
    [0.816847572980459, 0.091576213509771, 0.091576213509771],
    [0.091576213509771, 0.816847572980459, 0.091576213509771],
    [0.091576213509771, 0.091576213509771, 0.816847572980459],
])
_Q4_W = np.array([0.223381589678011] * 3 + [0.109951743655322] * 3)


def load_vector(mesh, func):
    """Full load vector ``int f phi_i`` by a degree-4 rule on every element."""
    pts = np.einsum("qk,tkd->tqd", _Q4_BARY, mesh.corners)
    vals = np.asarray(func(pts.reshape(-1, 2)), dtype=float).reshape(pts.shape[:2])
    local = np.einsum("tq,qk,q->tk", vals, _Q4_BARY, _Q4_W) * mesh.area[:, None]
    out = np.zeros(mesh.n_vertices)
    np.add.at(out, mesh.triangles.ravel(), local.ravel())
    return out


def interpolate(mesh, func):
    """Nodal interpolant of ``func(points) -> values`` as an FeFunction."""
    return FeFunction(mesh, np.asarray(func(mesh.vertices), dtype=float))
