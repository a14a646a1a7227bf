"""Index sets, predicted rates, two-scale reconstruction and rate fitting."""

from __future__ import annotations

import csv
import itertools
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .assembly import assemble_mass_surface, assemble_mass_volume, assemble_stiffness, element_gradients

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# index sets
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class IndexSet:
    members: tuple
    constraint: str

    def __contains__(self, item):
        return tuple(item) in self.members

    def __iter__(self):
        return iter(self.members)

    def __len__(self):
        return len(self.members)

    def as_set(self):
        return set(self.members)


def _check_theta(theta):
    if int(theta) != theta or theta < 2:
        raise ValueError(f"theta must be an integer >= 2, got {theta}")
    return int(theta)


def index_set_pairs(a, theta, style="M"):
    """``{(k, l) in [0, theta]^2 : k a + l >= 1, k + l <= theta}``.

    ``style`` only labels the set: ``"M"`` (``a = alpha``) or ``"Q"`` (``a = beta``).
    """
    theta = _check_theta(theta)
    if style not in ("M", "Q"):
        raise ValueError(f"style must be 'M' or 'Q', got {style!r}")
    name = "alpha" if style == "M" else "beta"
    members = tuple(
        (k, l) for k in range(theta + 1) for l in range(theta + 1) if k * a + l >= 1 and k + l <= theta
    )
    return IndexSet(members, f"{style}: k*{name}+l >= 1, k+l <= {theta} ({name}={a:g})")


def index_set_triples(alpha, beta, theta):
    """``{(k, l, n) in [0, theta]^3 : k (alpha + 1) + l beta + n >= 1, k + l + n <= theta}``."""
    theta = _check_theta(theta)
    members = tuple(
        t
        for t in itertools.product(range(theta + 1), repeat=3)
        if t[0] * (alpha + 1) + t[1] * beta + t[2] >= 1 and sum(t) <= theta
    )
    return IndexSet(members, f"k(alpha+1)+l*beta+n >= 1, k+l+n <= {theta} (alpha={alpha:g}, beta={beta:g})")


# --------------------------------------------------------------------------
# predicted rates
# --------------------------------------------------------------------------

REGIMES = ("volume_pos", "volume_neg", "surface_pos", "surface_small", "combined_pos", "combined_small", "combined_neg")


@dataclass
class RatePrediction:
    regime: str
    exponents: list
    citation: str
    norm: str = "energy"

    @property
    def dominant(self):
        return min(self.exponents)

    def passes(self, slope, factor=0.8):
        """Observed-vs-predicted rule: slope >= factor * dominant exponent."""
        return slope >= factor * self.dominant


def predicted_rate(regime, alpha=0.0, beta=0.0, theta=2, mu=0.0, surface_norm=False):
    """Exponent terms of the corrector / decay estimate for ``regime``.

    ``surface_norm=True`` converts a bound on ``sqrt(eps) ||u||_surf`` into
    one on ``||u||_surf`` (every exponent drops by 1/2).
    """
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    if regime in ("volume_pos", "surface_pos", "combined_pos"):
        theta = _check_theta(theta)
        if not 0 <= mu <= theta - 1:
            raise ValueError(f"mu must lie in [0, theta-1] = [0, {theta - 1}], got {mu}")

    def need(cond, msg):
        if not cond:
            raise ValueError(f"regime {regime} requires {msg} (alpha={alpha}, beta={beta})")

    if regime == "volume_pos":
        need(alpha > 0, "alpha > 0")
        ex, cite = [theta - 1 + alpha, mu + 0.5], "volume corrector estimate, alpha > 0"
    elif regime == "volume_neg":
        need(alpha < 0, "alpha < 0")
        ex, cite = [-alpha / 2, 1.0], "volume decay estimate, alpha < 0"
    elif regime == "surface_pos":
        need(beta > 1, "beta > 1")
        ex, cite = [theta + beta - 2, mu + 0.5], "surface corrector estimate, beta > 1"
    elif regime == "surface_small":
        need(beta < 1, "beta < 1")
        ex, cite = [(1 - beta) / 2, 0.5, 1.0], "surface decay estimate, beta < 1"
    elif regime == "combined_pos":
        need(alpha > 0 and beta > 1, "alpha > 0 and beta > 1")
        ex = [theta - 1 + alpha, theta + beta - 2, mu + min(mu * alpha, 0.0) + 0.5]
        cite = "combined corrector estimate, alpha > 0, beta > 1"
    elif regime == "combined_small":
        need(alpha > 0 and 0 <= beta < 1, "alpha > 0 and 0 <= beta < 1")
        ex = [(1 - beta) / 2, (1 - beta) / 2 + alpha / 2, 0.5]
        cite = "combined decay estimate, alpha > 0, 0 <= beta < 1"
    else:  # combined_neg
        need(alpha < 0 or beta < 0, "alpha < 0 or beta < 0")
        ex = [-min(alpha, beta) / 2, 1.0]
        cite = "combined decay estimate, negative exponent"
    norm = "energy"
    if surface_norm:
        ex = [e - 0.5 for e in ex]
        norm = "surface"
    return RatePrediction(regime, [float(e) for e in ex], cite, norm)


def detect_regime(alpha, beta, surface=True):
    """Map ``(alpha, beta)`` to the regime used for the sweep prediction."""
    if not surface:
        return "volume_pos" if alpha > 0 else "volume_neg"
    if alpha < 0 or beta < 0:
        return "combined_neg"
    if alpha > 0 and beta > 1:
        return "combined_pos"
    if alpha > 0 and 0 <= beta < 1:
        return "combined_small"
    raise ValueError(f"no regime covers alpha={alpha}, beta={beta}; set an explicit override")


# --------------------------------------------------------------------------
# cut-off
# --------------------------------------------------------------------------


def build_cutoff(mesh, epsilon):
    """Boundary-layer mask: 0 within ``eps`` of the square's boundary, 1 beyond ``2 eps``."""
    if epsilon >= 0.5:
        raise ValueError(f"cut-off needs eps < 0.5, got {epsilon}")
    v = mesh.vertices
    d = np.minimum.reduce([v[:, 0], 1 - v[:, 0], v[:, 1], 1 - v[:, 1]])
    return np.clip((d - epsilon) / epsilon, 0.0, 1.0)


# --------------------------------------------------------------------------
# point location and interpolation
# --------------------------------------------------------------------------


class LocationError(RuntimeError):
    pass


class TriangleLocator:
    """Bucket-grid point location on a triangle mesh."""

    def __init__(self, mesh, cells_per_side=None, tol=1e-10):
        self.mesh = mesh
        self.tol = tol
        p = mesh.vertices[mesh.triangles]
        self.lo = mesh.vertices.min(axis=0)
        self.hi = mesh.vertices.max(axis=0)
        nt = mesh.n_triangles
        n = cells_per_side or max(1, int(math.sqrt(nt / 2)))
        self.n = n
        self.size = (self.hi - self.lo) / n
        bmin = self._cell(p.min(axis=1) - tol)
        bmax = self._cell(p.max(axis=1) + tol)
        tri_ids, buckets = [], []
        for dx in range(int((bmax - bmin)[:, 0].max()) + 1):
            for dy in range(int((bmax - bmin)[:, 1].max()) + 1):
                ok = (bmin[:, 0] + dx <= bmax[:, 0]) & (bmin[:, 1] + dy <= bmax[:, 1])
                t = np.flatnonzero(ok)
                tri_ids.append(t)
                buckets.append((bmin[t, 0] + dx) * n + bmin[t, 1] + dy)
        tri_ids = np.concatenate(tri_ids)
        buckets = np.concatenate(buckets)
        order = np.lexsort((tri_ids, buckets))
        tri_ids, buckets = tri_ids[order], buckets[order]
        counts = np.bincount(buckets, minlength=n * n)
        width = int(counts.max())
        start = np.concatenate([[0], np.cumsum(counts)[:-1]])
        self.table = -np.ones((n * n, width), dtype=np.int64)
        slot = np.arange(len(buckets)) - start[buckets]
        self.table[buckets, slot] = tri_ids
        # barycentric inverse maps
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        self.origin = p[:, 0]
        self.inv = np.stack([np.stack([d2[:, 1], -d2[:, 0]], -1), np.stack([-d1[:, 1], d1[:, 0]], -1)], 1) / det[:, None, None]

    def _cell(self, x):
        c = np.floor((x - self.lo) / self.size).astype(np.int64)
        return np.clip(c, 0, self.n - 1)

    def locate(self, points, chunk=200_000):
        """Containing triangle and barycentric coordinates; ``-1`` where none is found."""
        points = np.asarray(points, dtype=float)
        tri = -np.ones(len(points), dtype=np.int64)
        bary = np.zeros((len(points), 3))
        for s in range(0, len(points), chunk):
            q = points[s : s + chunk]
            c = self._cell(q)
            cand = self.table[c[:, 0] * self.n + c[:, 1]]  # (nq, w)
            valid = cand >= 0
            cc = np.where(valid, cand, 0)
            rel = q[:, None, :] - self.origin[cc]
            lam12 = np.einsum("qwij,qwj->qwi", self.inv[cc], rel)
            lam0 = 1 - lam12.sum(-1)
            lmin = np.minimum(lam0, lam12.min(-1))
            lmin = np.where(valid, lmin, -np.inf)
            best = np.argmax(lmin, axis=1)
            rows = np.arange(len(q))
            found = lmin[rows, best] >= -self.tol
            t = cc[rows, best]
            tri[s : s + chunk] = np.where(found, t, -1)
            b = np.column_stack([lam0[rows, best], lam12[rows, best]])
            bary[s : s + chunk] = np.where(found[:, None], b, 0.0)
        return tri, bary

    def interpolate(self, values, points, fallback=False):
        """P1 interpolation of nodal ``values`` (shape ``(n,)`` or ``(n, k)``) at ``points``.

        With ``fallback`` unlocated points take the value of the nearest
        vertex; returns ``(result, n_fallback)``.  Otherwise raises
        :class:`LocationError`.
        """
        values = np.asarray(values, dtype=float)
        tri, bary = self.locate(points)
        miss = tri < 0
        tt = self.mesh.triangles[np.where(miss, 0, tri)]
        vals = values[tt]  # (nq, 3) or (nq, 3, k)
        out = np.einsum("qi,qi...->q...", bary, vals)
        if miss.any():
            if not fallback:
                bad = np.flatnonzero(miss)
                raise LocationError(f"{bad.size} points outside the mesh, e.g. {points[bad[0]].tolist()}")
            _, nearest = cKDTree(self.mesh.vertices).query(points[miss])
            out[miss] = values[nearest]
        return out, int(miss.sum())


def interpolate_macro_to_micro(u0, macro_mesh, micro_mesh, locator=None):
    """P1 interpolation of a macro field at the micro-mesh vertices."""
    loc = TriangleLocator(macro_mesh) if locator is None else locator
    out, _ = loc.interpolate(u0, micro_mesh.vertices)
    return out


def recovered_gradient(mesh, u):
    """Nodal gradient by area-weighted averaging of element gradients, ``(n, 2)``."""
    g = element_gradients(mesh, u)
    area = mesh.signed_areas()
    num = np.zeros((mesh.n_vertices, 2))
    den = np.zeros(mesh.n_vertices)
    for i in range(3):
        np.add.at(num, mesh.triangles[:, i], g * area[:, None])
        np.add.at(den, mesh.triangles[:, i], area)
    return num / den[:, None]


@dataclass
class Reconstruction:
    values: np.ndarray
    n_fallback: int = 0


def evaluate_corrector(cell, epsilon, points, locator=None):
    """``chi(x / eps)`` at physical points by periodic wrapping; returns ``(values (n, 2), n_fallback)``."""
    y = np.mod(np.asarray(points) / epsilon, 1.0)
    loc = TriangleLocator(cell.mesh) if locator is None else locator
    vals, nfb = loc.interpolate(cell.chi.T, y, fallback=True)
    if nfb:
        warnings.warn(f"{nfb} points fell inside the cell inclusion; used nearest liquid vertex", RuntimeWarning,
                      stacklevel=2)
    return vals, nfb


def reconstruct_expansion(u0, macro_mesh, cell, epsilon, micro_mesh, order=1, with_cutoff=False,
                          macro_locator=None, cell_locator=None, return_info=False):
    """Truncated two-scale expansion on the micro mesh.

    ``order=0`` gives the interpolated ``u0``; ``order=1`` gives
    ``u0(x) - eps chi(x/eps) . grad u0(x)``, the corrector term optionally
    multiplied by the cut-off.
    """
    if order not in (0, 1):
        raise ValueError(f"order must be 0 or 1, got {order}")
    mloc = TriangleLocator(macro_mesh) if macro_locator is None else macro_locator
    pts = micro_mesh.vertices
    base, _ = mloc.interpolate(u0, pts)
    nfb = 0
    if order == 1:
        grad = recovered_gradient(macro_mesh, u0)
        g, _ = mloc.interpolate(grad, pts)
        chi, nfb = evaluate_corrector(cell, epsilon, pts, cell_locator)
        corr = epsilon * np.einsum("qd,qd->q", chi, g)
        if with_cutoff:
            corr = corr * build_cutoff(micro_mesh, epsilon)
        base = base - corr
    return Reconstruction(base, nfb) if return_info else base


# --------------------------------------------------------------------------
# norms and fitting
# --------------------------------------------------------------------------


class NormOperators:
    """Full-mesh mass and ``A = I`` stiffness matrices used by :func:`error_norms`."""

    def __init__(self, mesh):
        self.mesh = mesh
        self.Mv = assemble_mass_volume(mesh)
        self.Ms = assemble_mass_surface(mesh)
        self.K = assemble_stiffness(mesh, None)

    @property
    def n(self):
        return self.Mv.shape[0]


def error_norms(u_micro, u_ref, mesh=None, ops=None):
    """``(L2_volume, H1_semi, L2_surface)`` of ``u_micro - u_ref``."""
    ops = NormOperators(mesh) if ops is None else ops
    u_micro = np.asarray(u_micro, dtype=float)
    u_ref = np.asarray(u_ref, dtype=float)
    if u_micro.shape != (ops.n,) or u_ref.shape != (ops.n,):
        raise ValueError(f"fields must have length {ops.n}, got {u_micro.shape} and {u_ref.shape}")
    d = u_micro - u_ref
    q = [d @ (X @ d) for X in (ops.Mv, ops.K, ops.Ms)]
    return tuple(math.sqrt(max(x, 0.0)) for x in q)


def rms_nodal(u):
    """Plain root-mean-square of nodal values (unweighted table norm)."""
    u = np.asarray(u, dtype=float)
    return float(np.sqrt(np.mean(u * u))) if u.size else 0.0


def trace_constant(l2_volume, l2_surface, h1_semi, epsilon):
    """Smallest ``C`` with ``eps ||u||_surf^2 <= C (||u||_vol^2 + eps^2 |u|_1^2)``."""
    den = l2_volume**2 + epsilon**2 * h1_semi**2
    return epsilon * l2_surface**2 / den if den > 0 else 0.0


class FitError(ValueError):
    pass


def fit_rate(records):
    """Least-squares slope of ``log(error)`` against ``log(eps)``.

    ``records`` is a sequence of ``(eps, error)``.  Non-positive errors are
    dropped with a warning; fewer than three surviving points is an error.
    Returns ``(slope, intercept, residual)`` with the RMS fit residual.
    """
    data = [(float(e), float(err)) for e, err in records]
    eps = [e for e, _ in data]
    if any(b >= a for a, b in zip(eps, eps[1:])):
        raise FitError(f"eps values must be strictly decreasing, got {eps}")
    kept = [(e, err) for e, err in data if err > 0 and math.isfinite(err)]
    if len(kept) < len(data):
        warnings.warn(f"dropped {len(data) - len(kept)} non-positive errors before fitting", RuntimeWarning,
                      stacklevel=2)
    if len(kept) < 3:
        raise FitError(f"need at least 3 positive errors to fit a rate, got {len(kept)}")
    x = np.log([e for e, _ in kept])
    y = np.log([err for _, err in kept])
    (slope, intercept), *_ = np.linalg.lstsq(np.column_stack([x, np.ones_like(x)]), y, rcond=None)
    resid = float(np.sqrt(np.mean((y - slope * x - intercept) ** 2)))
    return float(slope), float(intercept), resid


@dataclass
class ConvergenceRow:
    eps: float
    err_l2: float
    err_h1: float
    err_surf: float
    err_l2_rms: float = float("nan")


@dataclass
class ConvergenceRecord:
    rows: list = field(default_factory=list)
    prediction: RatePrediction | None = None
    fit_column: str = "err_l2"
    slope: float = float("nan")
    intercept: float = float("nan")
    residual: float = float("nan")

    COLUMNS = ("eps", "err_l2", "err_h1", "err_surf", "predicted_exponent", "fitted_slope", "err_l2_rms")

    def add(self, row: ConvergenceRow):
        if self.rows and row.eps >= self.rows[-1].eps:
            raise ValueError("eps must be strictly decreasing across rows")
        if min(row.err_l2, row.err_h1, row.err_surf) < 0:
            raise ValueError("errors must be nonnegative")
        self.rows.append(row)

    def column(self, name):
        return [getattr(r, name) for r in self.rows]

    def fit(self):
        self.slope, self.intercept, self.residual = fit_rate(list(zip(self.column("eps"), self.column(self.fit_column))))
        return self.slope

    def passed(self, factor=0.8):
        return self.prediction is not None and self.prediction.passes(self.slope, factor)

    def write_csv(self, path):
        pe = self.prediction.dominant if self.prediction else float("nan")
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(self.COLUMNS)
            for r in self.rows:
                wr.writerow([f"{v:.6g}" for v in (r.eps, r.err_l2, r.err_h1, r.err_surf, pe, self.slope, r.err_l2_rms)])


def read_record_csv(path):
    with open(path) as fh:
        rd = csv.DictReader(fh)
        return [{k: float(v) for k, v in row.items()} for row in rd]
