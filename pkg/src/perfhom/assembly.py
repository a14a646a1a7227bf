"""P1 finite-element operators on a :class:`~perfhom.mesh.Mesh`.

Everything is vectorized over elements: local matrices are built as
``(n_tri, 3, 3)`` stacks and scattered once into CSR form.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .linalg import csr_from_triplets
from .mesh import EXTERIOR, HOLE, periodic_pairs


class AssemblyError(ValueError):
    pass


# barycentric coordinates and weights (fractions of the triangle area)
_QUAD = {
    1: (np.array([[1 / 3, 1 / 3, 1 / 3]]), np.array([1.0])),
    3: (
        np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]]),
        np.array([1 / 3, 1 / 3, 1 / 3]),
    ),
}


@dataclass(frozen=True)
class CoefficientField:
    """Symmetric diffusion coefficient ``x -> A(x)``.

    ``func`` takes an ``(n, 2)`` array of points and returns either ``(n,)``
    scalars (isotropic shorthand) or ``(n, 2, 2)`` tensors.
    """

    func: Callable
    gamma_lower: float
    gamma_upper: float
    name: str = "A"

    def __call__(self, x):
        return self.func(np.asarray(x, dtype=float))

    def scaled(self, epsilon):
        """The oscillating field ``x -> A(x / epsilon)``."""
        f = self.func
        return CoefficientField(lambda x: f(x / epsilon), self.gamma_lower, self.gamma_upper, f"{self.name}(x/{epsilon:g})")

    def tensor(self, x):
        """Values at ``x`` promoted to ``(n, 2, 2)`` tensors."""
        a = np.asarray(self(x), dtype=float)
        if a.ndim == 1:
            out = np.zeros((len(a), 2, 2))
            out[:, 0, 0] = a
            out[:, 1, 1] = a
            return out
        return a

    def check(self, x, rtol=1e-10):
        """Spot-check ellipticity bounds at sample points ``x``."""
        a = self.tensor(x)
        if np.any(np.abs(a[:, 0, 1] - a[:, 1, 0]) > 1e-12 * (1 + np.abs(a[:, 0, 1]))):
            i = int(np.argmax(np.abs(a[:, 0, 1] - a[:, 1, 0])))
            raise AssemblyError(f"coefficient {self.name} not symmetric at point {x[i].tolist()}")
        lam = np.linalg.eigvalsh(a)
        lo = lam[:, 0] < self.gamma_lower * (1 - rtol)
        hi = lam[:, 1] > self.gamma_upper * (1 + rtol)
        bad = np.flatnonzero(lo | hi)
        if bad.size:
            i = int(bad[0])
            raise AssemblyError(
                f"coefficient {self.name} violates ellipticity bounds "
                f"[{self.gamma_lower}, {self.gamma_upper}] at quadrature point {x[i].tolist()} "
                f"(eigenvalues {lam[i].tolist()})"
            )


def constant_coefficient(c=1.0):
    c = float(c)
    return CoefficientField(lambda x: np.full(len(x), c), c, c, f"{c:g}I")


def tensor_coefficient(matrix):
    """Spatially constant symmetric tensor coefficient."""
    m = np.asarray(matrix, dtype=float)
    lam = np.linalg.eigvalsh(0.5 * (m + m.T))
    if lam[0] <= 0:
        raise AssemblyError(f"tensor {m.tolist()} is not positive definite")
    return CoefficientField(lambda x: np.broadcast_to(m, (len(x), 2, 2)), lam[0], lam[1], "Abar")


def _geometry(mesh):
    p = mesh.vertices[mesh.triangles]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    area = 0.5 * det
    # gradients of the barycentric basis functions, (n_tri, 3, 2)
    grads = np.empty((len(p), 3, 2))
    grads[:, 1, 0] = d2[:, 1] / det
    grads[:, 1, 1] = -d2[:, 0] / det
    grads[:, 2, 0] = -d1[:, 1] / det
    grads[:, 2, 1] = d1[:, 0] / det
    grads[:, 0] = -grads[:, 1] - grads[:, 2]
    return p, area, grads


def quadrature_points(mesh, quad_order=3):
    """Physical quadrature points ``(n_tri, n_q, 2)`` and weights ``(n_tri, n_q)``."""
    if quad_order not in _QUAD:
        raise AssemblyError(f"quad_order must be 1 or 3, got {quad_order}")
    bary, w = _QUAD[quad_order]
    p, area, _ = _geometry(mesh)
    pts = np.einsum("qi,tid->tqd", bary, p)
    return pts, area[:, None] * w[None, :]


def element_gradients(mesh, u):
    """Constant gradient of the P1 field ``u`` on every triangle, ``(n_tri, 2)``."""
    _, _, grads = _geometry(mesh)
    return np.einsum("tid,ti->td", grads, np.asarray(u)[mesh.triangles])


def _scatter(mesh, local, n=None):
    t = mesh.triangles
    n = mesh.n_vertices if n is None else n
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    return csr_from_triplets(n, rows=rows, cols=cols, vals=local.ravel())


def mean_coefficient(mesh, A, quad_order=3):
    """Quadrature-averaged tensor per triangle, ``(n_tri, 2, 2)`` times area."""
    pts, w = quadrature_points(mesh, quad_order)
    flat = pts.reshape(-1, 2)
    A.check(flat)
    a = A.tensor(flat).reshape(pts.shape[0], pts.shape[1], 2, 2)
    return np.einsum("tq,tqij->tij", w, a)


def assemble_stiffness(mesh, A=None, quad_order=3):
    """Stiffness matrix of ``int A grad u . grad v`` (A = identity when omitted)."""
    if quad_order not in _QUAD:
        raise AssemblyError(f"quad_order must be 1 or 3, got {quad_order}")
    _, area, grads = _geometry(mesh)
    if A is None:
        Aint = area[:, None, None] * np.eye(2)[None]
    else:
        Aint = mean_coefficient(mesh, A, quad_order)
    local = np.einsum("tid,tde,tje->tij", grads, Aint, grads)
    return _scatter(mesh, local)


_MASS_REF = (np.ones((3, 3)) + np.eye(3)) / 12.0


def assemble_mass_volume(mesh):
    """Consistent P1 mass matrix; local block ``(T/12) [[2,1,1],[1,2,1],[1,1,2]]``."""
    area = mesh.signed_areas()
    local = area[:, None, None] * _MASS_REF[None]
    return _scatter(mesh, local)


def assemble_mass_surface(mesh, tag=HOLE):
    """Consistent 1D mass matrix on edges with ``tag``; local ``(l/6) [[2,1],[1,2]]``."""
    e = mesh.edges_with_tag(tag)
    n = mesh.n_vertices
    if len(e) == 0:
        return csr_from_triplets(n, rows=[], cols=[], vals=[])
    length = np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1)
    local = length[:, None, None] * (np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0)[None]
    rows = np.repeat(e, 2, axis=1).ravel()
    cols = np.tile(e, (1, 2)).ravel()
    return csr_from_triplets(n, rows=rows, cols=cols, vals=local.ravel())


def assemble_load(mesh, f=1.0, quad_order=3):
    """Load vector ``int f phi_i``; ``f`` is a constant or a callable on ``(n, 2)`` points."""
    n = mesh.n_vertices
    if not callable(f):
        area = mesh.signed_areas()
        b = np.zeros(n)
        np.add.at(b, mesh.triangles.ravel(), np.repeat(float(f) * area / 3.0, 3))
        return b
    bary, w = _QUAD[quad_order]
    pts, wts = quadrature_points(mesh, quad_order)
    fv = np.asarray(f(pts.reshape(-1, 2)), dtype=float).reshape(wts.shape)
    local = np.einsum("tq,tq,qi->ti", wts, fv, bary)
    b = np.zeros(n)
    np.add.at(b, mesh.triangles.ravel(), local.ravel())
    return b


# --------------------------------------------------------------------------
# constraints
# --------------------------------------------------------------------------


@dataclass
class AssembledSystem:
    """Full (unconstrained) operators on all mesh vertices."""

    stiffness: sp.csr_matrix
    mass_volume: sp.csr_matrix
    mass_surface: sp.csr_matrix
    load: np.ndarray
    dirichlet_dofs: np.ndarray

    @property
    def n(self):
        return self.stiffness.shape[0]


def assemble_system(mesh, A=None, f=1.0, quad_order=3):
    return AssembledSystem(
        stiffness=assemble_stiffness(mesh, A, quad_order),
        mass_volume=assemble_mass_volume(mesh),
        mass_surface=assemble_mass_surface(mesh),
        load=assemble_load(mesh, f, quad_order),
        dirichlet_dofs=mesh.vertices_with_tag(EXTERIOR),
    )


@dataclass
class ReducedSystem:
    """Operators after constraint elimination, with the map back to vertices.

    ``prolongation`` is the ``(n_full, n_reduced)`` matrix ``P`` such that
    ``u_full = P @ u_reduced``; reduced operators are ``P.T @ K @ P``.
    """

    stiffness: sp.csr_matrix
    mass_volume: sp.csr_matrix
    mass_surface: sp.csr_matrix
    load: np.ndarray
    prolongation: sp.csr_matrix
    free_dofs: np.ndarray

    @property
    def n(self):
        return self.stiffness.shape[0]

    def extend(self, u):
        u = np.asarray(u, dtype=float)
        if u.shape != (self.n,):
            raise ValueError(f"expected reduced vector of length {self.n}, got {u.shape}")
        return self.prolongation @ u

    def restrict(self, K):
        P = self.prolongation
        return (P.T @ K @ P).tocsr()


def _selection(n_full, keep):
    keep = np.asarray(keep, dtype=np.int64)
    return sp.csr_matrix((np.ones(len(keep)), (keep, np.arange(len(keep)))), shape=(n_full, len(keep)))


def _reduce(system, P, free):
    K = (P.T @ system.stiffness @ P).tocsr()
    Mv = (P.T @ system.mass_volume @ P).tocsr()
    Ms = (P.T @ system.mass_surface @ P).tocsr()
    for X in (K, Mv, Ms):
        X.sum_duplicates()
        X.sort_indices()
    return ReducedSystem(K, Mv, Ms, P.T @ system.load, P.tocsr(), free)


def apply_dirichlet(system):
    """Eliminate the Dirichlet dofs (homogeneous values) by row/column removal.

    An all-Dirichlet system yields an empty reduced system whose extension is
    the zero vector.
    """
    n = system.n
    fixed = np.zeros(n, dtype=bool)
    fixed[np.asarray(system.dirichlet_dofs, dtype=np.int64)] = True
    free = np.flatnonzero(~fixed)
    P = _selection(n, free)
    return _reduce(system, P, free)


def periodic_master_map(mesh):
    """Map every vertex to its periodic master (x1 = 1 -> x1 = 0, x2 = 1 -> x2 = 0)."""
    px, py = periodic_pairs(mesh)
    v = mesh.vertices
    master = np.arange(mesh.n_vertices)
    for i, j in px.items():
        if abs(v[i, 0] - 1.0) < 1e-10:
            master[i] = j
    for i, j in py.items():
        if abs(v[i, 1] - 1.0) < 1e-10:
            master[i] = master[j]
    # second pass resolves corners mapped through x then y
    for i, j in py.items():
        if abs(v[i, 1] - 1.0) < 1e-10:
            master[i] = master[j]
    master = master[master]
    return master


def apply_periodic(system, mesh, pin=None):
    """Fold slave dofs onto their periodic masters and pin one master dof.

    The pinned dof removes the constant kernel (the quotient by constants).
    ``pin`` selects the pinned vertex (a master); defaults to the first master.
    """
    master = periodic_master_map(mesh)
    masters = np.unique(master)
    col_of = -np.ones(mesh.n_vertices, dtype=np.int64)
    col_of[masters] = np.arange(len(masters))
    if pin is None:
        pin = int(masters[0])
    if master[pin] != pin:
        raise AssemblyError(f"pinned vertex {pin} is a periodic slave")
    keep = np.ones(len(masters), dtype=bool)
    keep[col_of[pin]] = False
    new_col = -np.ones(len(masters), dtype=np.int64)
    new_col[keep] = np.arange(keep.sum())
    cols = new_col[col_of[master]]
    rows = np.arange(mesh.n_vertices)
    ok = cols >= 0
    P = sp.csr_matrix((np.ones(ok.sum()), (rows[ok], cols[ok])), shape=(mesh.n_vertices, int(keep.sum())))
    free = masters[keep]
    return _reduce(system, P, free)


def periodic_prolongation(mesh):
    """Unpinned folding matrix ``(n_vertices, n_masters)``; maps constants to constants."""
    master = periodic_master_map(mesh)
    masters = np.unique(master)
    col_of = -np.ones(mesh.n_vertices, dtype=np.int64)
    col_of[masters] = np.arange(len(masters))
    n = mesh.n_vertices
    return sp.csr_matrix((np.ones(n), (np.arange(n), col_of[master])), shape=(n, len(masters)))
