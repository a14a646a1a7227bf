"""Sparse symmetric linear algebra: CSR construction, products and PCG.

Storage is delegated to :class:`scipy.sparse.csr_matrix` in canonical form
(sorted, duplicate-free column indices). The conjugate gradient iteration is
written out here so that the stopping rule, NaN handling and iteration
statistics are under our control.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

SparseMatrix = sp.csr_matrix


class ConvergenceError(RuntimeError):
    """Raised when an iterative solver fails to reach its tolerance."""

    def __init__(self, message, iterations=None, residual=None):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


def csr_from_triplets(n, triplets=None, rows=None, cols=None, vals=None, shape=None):
    """Build a canonical CSR matrix from (row, col, value) triplets.

    Either pass ``triplets`` as an iterable of 3-tuples or the three arrays
    ``rows``, ``cols``, ``vals``. Duplicates are summed.
    """
    if triplets is not None:
        triplets = list(triplets)
        if triplets:
            rows, cols, vals = (np.asarray(t) for t in zip(*triplets))
        else:
            rows = cols = np.zeros(0, dtype=np.int64)
            vals = np.zeros(0)
    rows = np.asarray(rows, dtype=np.int64).ravel()
    cols = np.asarray(cols, dtype=np.int64).ravel()
    vals = np.asarray(vals, dtype=float).ravel()
    if shape is None:
        shape = (n, n)
    if rows.size:
        if rows.min() < 0 or cols.min() < 0 or rows.max() >= shape[0] or cols.max() >= shape[1]:
            raise IndexError(f"triplet index out of range for shape {shape}")
    A = sp.coo_matrix((vals, (rows, cols)), shape=shape).tocsr()
    A.sum_duplicates()
    A.sort_indices()
    return A


def spmv(A, x):
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != A.shape[1]:
        raise ValueError(f"dimension mismatch: matrix {A.shape}, vector {x.shape}")
    return A @ x


def is_symmetric(A, rtol=1e-12):
    """Max entrywise asymmetry relative to the largest entry is below ``rtol``."""
    if A.shape[0] != A.shape[1]:
        return False
    if A.nnz == 0:
        return True
    diff = abs(A - A.T)
    scale = abs(A).max()
    return diff.max() <= rtol * scale if diff.nnz else True


@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    residual: float
    history: list

    def __iter__(self):
        # allows ``x, it, res = cg_solve(...)``
        return iter((self.x, self.iterations, self.residual))


def jacobi(A):
    d = A.diagonal().astype(float)
    if np.any(d <= 0):
        raise ValueError("Jacobi preconditioner needs a positive diagonal")
    return 1.0 / d


def cg_solve(A, b, tol=1e-10, max_iter=None, x0=None, inv_diag=None, atol=0.0, callback=None):
    """Jacobi-preconditioned conjugate gradients for SPD ``A``.

    Stops when ``||b - A x|| <= max(tol * ||b||, atol)``.

    Parameters
    ----------
    A : csr_matrix
        Symmetric positive definite operator.
    b : ndarray
        Right-hand side.
    tol : float
        Relative residual tolerance.
    max_iter : int, optional
        Defaults to ``max(10 n, 100)``.
    x0 : ndarray, optional
        Initial guess (zero by default).
    inv_diag : ndarray, optional
        Reciprocal diagonal, to reuse a preconditioner across solves.
    atol : float
        Absolute floor on the residual norm.
    callback : callable, optional
        Called as ``callback(x)`` after every iteration.

    Returns
    -------
    CGResult
        Unpacks as ``(x, iterations, final_residual)``; ``history`` holds the
        Euclidean residual norm after each iteration.
    """
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    if A.shape != (n, n):
        raise ValueError(f"dimension mismatch: matrix {A.shape}, rhs {b.shape}")
    if max_iter is None:
        max_iter = max(10 * n, 100)
    if inv_diag is None:
        inv_diag = jacobi(A) if n else np.zeros(0)

    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    if n == 0:
        return CGResult(x, 0, 0.0, [])
    r = b - A @ x if x0 is not None else b.copy()
    bnorm = np.linalg.norm(b)
    stop = max(tol * bnorm, atol)
    rnorm = np.linalg.norm(r)
    if rnorm <= stop:
        return CGResult(x, 0, float(rnorm), [])

    z = inv_diag * r
    p = z.copy()
    rz = r @ z
    history = [rnorm]
    for k in range(1, max_iter + 1):
        Ap = A @ p
        pAp = p @ Ap
        if not np.isfinite(pAp):
            raise ConvergenceError(f"CG produced non-finite value at iteration {k}", k, rnorm)
        if pAp <= 0:
            raise ConvergenceError(
                f"CG met non-positive curvature p.Ap={pAp:.3e} at iteration {k}; matrix not SPD", k, rnorm
            )
        step = rz / pAp
        x += step * p
        r -= step * Ap
        rnorm = np.linalg.norm(r)
        if not np.isfinite(rnorm):
            raise ConvergenceError(f"CG residual became NaN at iteration {k}", k, rnorm)
        history.append(rnorm)
        if callback is not None:
            callback(x)
        if rnorm <= stop:
            return CGResult(x, k, float(rnorm), history)
        z = inv_diag * r
        rz_new = r @ z
        p *= rz_new / rz
        p += z
        rz = rz_new
    raise ConvergenceError(
        f"CG did not converge in {max_iter} iterations (residual {rnorm:.3e}, target {stop:.3e})",
        max_iter,
        rnorm,
    )
