"""Homogenized problems on the unperforated unit square.

Linear:      -div(Abar grad u0) = theta f
Semilinear:  -div(Abar grad u0) - theta Rbar(u0) = theta f

with ``theta = |Y_l| / |Y|`` and zero Dirichlet data.  The semilinear
problem reuses the micro linearization scheme at ``eps = 1``,
``alpha = beta = 0`` with the porosity-weighted volume mass.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .assembly import (
    AssembledSystem,
    apply_dirichlet,
    assemble_load,
    assemble_mass_volume,
    assemble_stiffness,
    tensor_coefficient,
)
from .linalg import cg_solve, csr_from_triplets
from .mesh import EXTERIOR, HOLE, unit_square_mesh
from .micro import MicroProblem, ReactionSpec, ScalingConfig, solve_micro


@dataclass
class MacroProblem:
    """Data of the homogenized problem."""

    A_eff: np.ndarray
    porosity: float
    f: object = 1.0
    reaction: Optional[Callable] = None  # Rbar, with its written sign
    delta0: float = 1.0
    delta1: float = 1.0

    def __post_init__(self):
        self.A_eff = np.asarray(self.A_eff, dtype=float)
        if self.A_eff.ndim == 0:
            self.A_eff = self.A_eff * np.eye(2)
        if self.A_eff.shape != (2, 2):
            raise ValueError(f"A_eff must be 2x2, got shape {self.A_eff.shape}")
        if not 0 < self.porosity <= 1:
            raise ValueError(f"porosity must lie in (0, 1], got {self.porosity}")
        # raises on non-elliptic tensors
        self.coefficient = tensor_coefficient(self.A_eff)


def _check_macro_mesh(mesh):
    if len(mesh.edges_with_tag(HOLE)):
        raise ValueError("macro mesh must not contain holes")


def _system(mesh, problem, quad_order=3):
    _check_macro_mesh(mesh)
    n = mesh.n_vertices
    return AssembledSystem(
        stiffness=assemble_stiffness(mesh, problem.coefficient, quad_order),
        mass_volume=problem.porosity * assemble_mass_volume(mesh),
        mass_surface=csr_from_triplets(n, rows=[], cols=[], vals=[]),
        load=problem.porosity * assemble_load(mesh, problem.f, quad_order),
        dirichlet_dofs=mesh.vertices_with_tag(EXTERIOR),
    )


def solve_macro_linear(mesh, problem: MacroProblem, tol=1e-12, return_info=False):
    """Discrete weak solution of ``-div(Abar grad u0) = theta f`` with zero boundary values."""
    red = apply_dirichlet(_system(mesh, problem))
    if np.linalg.norm(red.load) == 0.0:
        u = np.zeros(mesh.n_vertices)
        info = (0, 0.0)
    else:
        sol = cg_solve(red.stiffness, red.load, tol=tol, max_iter=20 * red.n + 100)
        u = red.extend(sol.x)
        info = (sol.iterations, sol.residual)
    return (u, info) if return_info else u


def solve_macro_semilinear(mesh, problem: MacroProblem, tol_fixpoint=1e-10, max_iter=5000):
    """Semilinear homogenized problem via the stabilized scheme.

    The reaction enters as ``R = -Rbar`` in the micro convention, so the
    declared bounds ``delta0 <= -Rbar' <= delta1`` must hold.  Returns
    ``(u, trace)``.
    """
    if problem.reaction is None:
        Rbar = lambda z: np.zeros_like(np.asarray(z, dtype=float))  # noqa: E731
    else:
        Rbar = problem.reaction
    reactions = ReactionSpec(lambda z: -np.asarray(Rbar(z)), None, problem.delta0, problem.delta1, "-Rbar")
    config = ScalingConfig.build(1.0, 0.0, 0.0, problem.delta0, problem.delta1, surface=False)
    system = _system(mesh, problem)
    prob = MicroProblem(mesh, None, config, system=system)
    return solve_micro(mesh, None, config, reactions, tol_fixpoint=tol_fixpoint, max_iter=max_iter, problem=prob,
                       check_reactions=problem.reaction is not None)


def default_macro_mesh(n=128):
    return unit_square_mesh(n)


def write_field_csv(mesh, u, path, name="u"):
    """Nodal field export: rows ``x1, x2, u`` with 6 significant digits."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["x1", "x2", name])
        for (x1, x2), val in zip(mesh.vertices, u):
            wr.writerow([f"{x1:.6g}", f"{x2:.6g}", f"{val:.6g}"])
