"""Homogenization of semilinear elliptic problems on periodically perforated domains.

Modules
-------
mesh      P1 meshes of perforated squares and of the periodic unit cell
assembly  stiffness / mass / load assembly, Dirichlet and periodic reduction
linalg    CSR helpers and Jacobi-preconditioned conjugate gradients
micro     stabilized linearization (Picard) solver for the microscopic problem
cell      periodic cell problems and the effective tensor
macro     homogenized problems on the unperforated square
scaling   index sets, predicted rates, two-scale reconstruction, error norms
cli       configuration-driven command line harness
"""

__version__ = "0.1.0"
