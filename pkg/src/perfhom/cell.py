"""Periodic cell problems, effective tensor and porosity.

The corrector ``chi^j`` on the liquid part ``Y_l`` of the unit cell solves,
for every periodic test function ``phi``,

    int_{Y_l} A grad(chi^j) . grad(phi) = int_{Y_l} A e_j . grad(phi),

with zero mean over ``Y_l``.  With this sign the first-order term of the
two-scale expansion reads ``-chi(x/eps) . grad u0`` and the effective tensor
is ``Abar = int_{Y_l} (I - grad chi) A dy``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .assembly import (
    AssembledSystem,
    AssemblyError,
    _geometry,
    apply_periodic,
    assemble_mass_volume,
    assemble_stiffness,
    quadrature_points,
)
from .linalg import cg_solve, csr_from_triplets
from .mesh import Mesh

log = logging.getLogger(__name__)

ASYMMETRY_TOL = 1e-6


@dataclass
class CellSolution:
    """Correctors, effective tensor and porosity of a periodic cell."""

    mesh: Mesh
    chi: np.ndarray  # (2, n_vertices)
    A_eff: np.ndarray
    porosity: float
    residuals: tuple = (0.0, 0.0)
    iterations: tuple = (0, 0)
    asymmetry: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def chi1(self):
        return self.chi[0]

    @property
    def chi2(self):
        return self.chi[1]


def porosity(cell_mesh):
    """Liquid volume fraction ``|Y_l| / |Y|`` (``|Y| = 1``)."""
    return cell_mesh.area()


def _flux_load(cell_mesh, A, j, quad_order=3):
    """Vector ``b_i = int A e_j . grad(phi_i)``."""
    pts, w = quadrature_points(cell_mesh, quad_order)
    flat = pts.reshape(-1, 2)
    a = A.tensor(flat).reshape(pts.shape[0], pts.shape[1], 2, 2)
    Aej = np.einsum("tq,tqd->td", w, a[:, :, :, j - 1])
    _, _, grads = _geometry(cell_mesh)
    local = np.einsum("tid,td->ti", grads, Aej)
    b = np.zeros(cell_mesh.n_vertices)
    np.add.at(b, cell_mesh.triangles.ravel(), local.ravel())
    return b


def _discrete_mean(mass, u):
    w = np.asarray(mass.sum(axis=0)).ravel()
    return float(w @ u / w.sum())


def solve_cell_problem(cell_mesh, A, j, tol=1e-12, quad_order=3, pin=None, stiffness=None, return_info=False):
    """Periodic corrector ``chi^j`` (``j`` in {1, 2}) as a nodal field with zero mean.

    Slave vertices receive their master value, so the returned field is a
    genuine periodic P1 function on the cell mesh.
    """
    if j not in (1, 2):
        raise ValueError(f"direction j must be 1 or 2, got {j}")
    K = assemble_stiffness(cell_mesh, A, quad_order) if stiffness is None else stiffness
    Mv = assemble_mass_volume(cell_mesh)
    b = _flux_load(cell_mesh, A, j, quad_order)
    empty = csr_from_triplets(cell_mesh.n_vertices, rows=[], cols=[], vals=[])
    red = apply_periodic(AssembledSystem(K, Mv, empty, b, np.array([], dtype=np.int64)), cell_mesh, pin=pin)
    if np.linalg.norm(red.load) == 0.0:
        chi = np.zeros(cell_mesh.n_vertices)
        res = (chi, 0, 0.0)
    else:
        sol = cg_solve(red.stiffness, red.load, tol=tol, max_iter=20 * red.n + 100)
        chi = red.extend(sol.x)
        res = (chi, sol.iterations, sol.residual / np.linalg.norm(red.load))
    chi = chi - _discrete_mean(Mv, chi)
    if return_info:
        return chi, res[1], res[2]
    return chi


def effective_tensor(cell_mesh, A, chi1, chi2, quad_order=3, check_symmetry=True):
    """``Abar = int_{Y_l} (I - grad chi) A dy`` with ``(grad chi)_{jk} = d chi^j / d y_k``.

    Returns the 2x2 tensor; asymmetry above ``1e-6`` is logged as a sign of
    insufficient mesh resolution (and raised when ``check_symmetry='raise'``).
    """
    pts, w = quadrature_points(cell_mesh, quad_order)
    flat = pts.reshape(-1, 2)
    a = A.tensor(flat).reshape(pts.shape[0], pts.shape[1], 2, 2)
    Aint = np.einsum("tq,tqij->tij", w, a)  # per-element integral of A
    _, _, grads = _geometry(cell_mesh)
    G = np.stack(
        [np.einsum("tid,ti->td", grads, np.asarray(c)[cell_mesh.triangles]) for c in (chi1, chi2)], axis=1
    )  # (n_tri, j, k)
    I = np.eye(2)[None]
    Abar = np.einsum("tjk,tkl->jl", I - G, Aint)
    asym = abs(Abar[0, 1] - Abar[1, 0])
    if asym > ASYMMETRY_TOL:
        msg = f"effective tensor asymmetry {asym:.3e} exceeds {ASYMMETRY_TOL:g}; refine the cell mesh"
        if check_symmetry == "raise":
            raise AssemblyError(msg)
        log.warning(msg)
    return Abar


def compute_cell(cell_mesh, A, tol=1e-12, quad_order=3, pin=None):
    """Solve both cell problems and assemble a :class:`CellSolution`."""
    K = assemble_stiffness(cell_mesh, A, quad_order)
    out = [solve_cell_problem(cell_mesh, A, j, tol, quad_order, pin, K, return_info=True) for j in (1, 2)]
    chi = np.vstack([o[0] for o in out])
    Abar = effective_tensor(cell_mesh, A, chi[0], chi[1], quad_order)
    asym = abs(Abar[0, 1] - Abar[1, 0])
    return CellSolution(
        mesh=cell_mesh,
        chi=chi,
        A_eff=Abar,
        porosity=porosity(cell_mesh),
        residuals=tuple(o[2] for o in out),
        iterations=tuple(o[1] for o in out),
        asymmetry=asym,
        meta={"coefficient": getattr(A, "name", "A")},
    )


def symmetrized(Abar):
    return 0.5 * (Abar + Abar.T)


def write_tensor_csv(Abar, path):
    """Write the tensor as a 2x2 CSV block with 6 significant digits."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        for row in np.asarray(Abar):
            wr.writerow([f"{v:.6g}" for v in row])


def read_tensor_csv(path):
    with open(path) as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh) if row])


def write_chi_csv(solution, path):
    v = solution.mesh.vertices
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["y1", "y2", "chi1", "chi2"])
        for (y1, y2), c1, c2 in zip(v, solution.chi[0], solution.chi[1]):
            wr.writerow([f"{y1:.6g}", f"{y2:.6g}", f"{c1:.6g}", f"{c2:.6g}"])
