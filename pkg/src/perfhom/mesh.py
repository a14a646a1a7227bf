"""Triangular P1 meshes of the perforated unit square and of the periodic cell.

The unit cell ``Y = (0,1)^2`` with a centered solid disk of radius ``r`` is
meshed with a structured O-grid on one eighth of the cell (the wedge between
the rays at 0 and 45 degrees around the disk center), which is then mirrored
into all eight octants. The resulting mesh is invariant under the symmetry
group of the square, so a cell solve with a symmetric coefficient yields an
exactly isotropic discrete tensor, and the nodes on opposite cell sides match
pairwise. Perforated macro meshes are obtained by tiling scaled copies of the
cell mesh, which keeps micro nodes in one-to-one correspondence with cell
nodes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

EXTERIOR = "EXTERIOR"
HOLE = "HOLE"
PERIODIC_X = "PERIODIC_X"
PERIODIC_Y = "PERIODIC_Y"
TAGS = (EXTERIOR, HOLE, PERIODIC_X, PERIODIC_Y)

_BTOL = 1e-12


class MeshError(ValueError):
    pass


def _frozen(a, dtype):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable triangulation with tagged boundary edges.

    ``boundary_edges`` is an ``(k, 2)`` integer array and ``boundary_tags`` a
    parallel array of tag strings drawn from :data:`TAGS`.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    boundary_tags: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vertices", _frozen(self.vertices, float).reshape(-1, 2))
        object.__setattr__(self, "triangles", _frozen(self.triangles, np.int64).reshape(-1, 3))
        object.__setattr__(self, "boundary_edges", _frozen(self.boundary_edges, np.int64).reshape(-1, 2))
        object.__setattr__(self, "boundary_tags", _frozen(np.asarray(self.boundary_tags, dtype=object), object))
        if len(self.boundary_tags) != len(self.boundary_edges):
            raise MeshError("boundary_tags must match boundary_edges in length")
        unknown = set(self.boundary_tags) - set(TAGS)
        if unknown:
            raise MeshError(f"unknown boundary tags {sorted(unknown)}")

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    def signed_areas(self):
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def area(self):
        return float(self.signed_areas().sum())

    def edges(self):
        """Unique undirected edges as a sorted ``(e, 2)`` array."""
        t = self.triangles
        e = np.vstack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    @property
    def h_max(self):
        e = self.edges()
        if len(e) == 0:
            return 0.0
        return float(np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1).max())

    def edges_with_tag(self, tag):
        return self.boundary_edges[self.boundary_tags == tag]

    def vertices_with_tag(self, tag):
        return np.unique(self.edges_with_tag(tag))

    def hole_perimeter(self):
        e = self.edges_with_tag(HOLE)
        return float(np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1).sum())

    def count_hole_loops(self):
        """Number of closed HOLE polylines (connected components of HOLE edges)."""
        e = self.edges_with_tag(HOLE)
        if len(e) == 0:
            return 0
        parent = {}

        def find(a):
            while parent.setdefault(a, a) != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for a, b in e:
            ra, rb = find(int(a)), find(int(b))
            if ra != rb:
                parent[ra] = rb
        return len({find(int(v)) for v in np.unique(e)})

    def validate(self):
        """Check orientation and edge incidence; raise :class:`MeshError` on failure."""
        areas = self.signed_areas()
        bad = np.flatnonzero(areas <= 0)
        if bad.size:
            raise MeshError(f"non-positive triangle area at triangle indices {bad.tolist()[:20]}")
        t = self.triangles
        e = np.vstack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        if np.any(counts > 2):
            raise MeshError("edge shared by more than two triangles")
        boundary = {tuple(x) for x in uniq[counts == 1]}
        tagged = {tuple(sorted(x)) for x in self.boundary_edges.tolist()}
        if boundary != tagged:
            raise MeshError(
                f"tagged boundary edges do not match topological boundary "
                f"({len(tagged - boundary)} spurious, {len(boundary - tagged)} untagged)"
            )
        return True


@dataclass(frozen=True)
class GeometrySpec:
    """Perforated square ``(0,1)^2`` with ``(1/epsilon)^2`` holes of radius ``epsilon * hole_radius``."""

    epsilon: float
    hole_radius: float
    target_h: float

    @property
    def n_cells(self):
        return _cells_per_side(self.epsilon)

    def validate(self):
        _cells_per_side(self.epsilon)
        _check_radius(self.hole_radius)
        if not self.target_h > 0:
            raise MeshError("target_h must be positive")
        if self.target_h > self.epsilon / 8 * (1 + 1e-9):
            raise MeshError(
                f"target_h={self.target_h} exceeds epsilon/8={self.epsilon / 8}; "
                "each period needs at least 8 elements"
            )
        return self


def _cells_per_side(epsilon):
    if not epsilon > 0:
        raise MeshError(f"epsilon must be positive, got {epsilon}")
    n = round(1.0 / epsilon)
    if n < 1 or abs(n * epsilon - 1.0) > 1e-9:
        raise MeshError(f"1/epsilon must be a positive integer, got epsilon={epsilon}")
    return n


def _check_radius(r):
    if not (0 <= r < 0.5):
        raise MeshError(f"hole radius must lie in [0, 0.5), got {r}")


# --------------------------------------------------------------------------
# cell meshes
# --------------------------------------------------------------------------

# the eight symmetries of the square, acting on centered coordinates
_D4 = [
    np.array([[1, 0], [0, 1]]),
    np.array([[0, 1], [1, 0]]),
    np.array([[-1, 0], [0, 1]]),
    np.array([[0, -1], [1, 0]]),
    np.array([[1, 0], [0, -1]]),
    np.array([[0, 1], [-1, 0]]),
    np.array([[-1, 0], [0, -1]]),
    np.array([[0, -1], [-1, 0]]),
]


def _wedge(r, m, k, graded):
    """O-grid nodes/triangles on the wedge 0 <= angle <= 45 deg, centered coordinates."""
    t = np.arange(m + 1) / m
    theta = np.arctan(t)
    outer = np.stack([np.full(m + 1, 0.5), 0.5 * t], axis=1)
    inner = r * np.stack([np.cos(theta), np.sin(theta)], axis=1)
    s = np.arange(k + 1) / k
    R = np.linalg.norm(outer, axis=1)
    if graded:
        rho = r * (R[None, :] / r) ** s[:, None]
    else:
        rho = r + s[:, None] * (R - r)[None, :]
    rho[-1] = R
    direction = inner / r
    pts = rho[:, :, None] * direction[None, :, :]
    pts[-1] = outer
    idx = np.arange((k + 1) * (m + 1)).reshape(k + 1, m + 1)
    tris = []
    for i in range(k):
        for j in range(m):
            a, b, c, d = idx[i, j], idx[i + 1, j], idx[i + 1, j + 1], idx[i, j + 1]
            pa, pb, pc, pd = (pts[i, j], pts[i + 1, j], pts[i + 1, j + 1], pts[i, j + 1])
            if np.linalg.norm(pa - pc) <= np.linalg.norm(pb - pd):
                tris += [(a, b, c), (a, c, d)]
            else:
                tris += [(a, b, d), (b, c, d)]
    return pts.reshape(-1, 2), np.array(tris, dtype=np.int64)


def _union_jack(n):
    """Structured n x n grid of the centered square [-1/2,1/2]^2, diagonals toward the center."""
    g = np.arange(n + 1) / n - 0.5
    X, Y = np.meshgrid(g, g, indexing="xy")
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    tris = []
    half = n / 2
    for j in range(n):
        for i in range(n):
            a, b, c, d = idx[j, i], idx[j, i + 1], idx[j + 1, i + 1], idx[j + 1, i]
            # diagonal through the corner nearest to the center
            if (i < half) == (j < half):
                tris += [(a, b, c), (a, c, d)]
            else:
                tris += [(a, b, d), (b, c, d)]
    return pts, np.array(tris, dtype=np.int64)


def _dedupe(points, tris, scale=1e-11):
    keys = np.round(points / scale).astype(np.int64)
    uniq, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.ravel()
    # keep the original float coordinates of the first occurrence
    return points[first], inverse[tris]


def _orient(vertices, tris):
    p = vertices[tris]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    neg = (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]) < 0
    tris = tris.copy()
    tris[neg] = tris[neg][:, [0, 2, 1]]
    return tris


def _boundary_edges(tris):
    e = np.vstack([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    s = np.sort(e, axis=1)
    uniq, counts = np.unique(s, axis=0, return_counts=True)
    return uniq[counts == 1]


def _cell_tags(vertices, bedges, r):
    p0, p1 = vertices[bedges[:, 0]], vertices[bedges[:, 1]]
    tags = np.empty(len(bedges), dtype=object)
    for n, (a, b) in enumerate(zip(p0, p1)):
        if abs(a[0] - b[0]) < _BTOL and (abs(a[0]) < _BTOL or abs(a[0] - 1) < _BTOL):
            tags[n] = PERIODIC_X
        elif abs(a[1] - b[1]) < _BTOL and (abs(a[1]) < _BTOL or abs(a[1] - 1) < _BTOL):
            tags[n] = PERIODIC_Y
        elif r > 0 and abs(np.hypot(*(a - 0.5)) - r) < 1e-9 and abs(np.hypot(*(b - 0.5)) - r) < 1e-9:
            tags[n] = HOLE
        else:
            raise MeshError(f"boundary edge {bedges[n].tolist()} is neither on the cell sides nor on the hole")
    return tags


def _min_angle_deg(vertices, tris):
    p = vertices[tris]
    a = np.linalg.norm(p[:, 1] - p[:, 2], axis=1)
    b = np.linalg.norm(p[:, 2] - p[:, 0], axis=1)
    c = np.linalg.norm(p[:, 0] - p[:, 1], axis=1)
    cosA = np.clip((b**2 + c**2 - a**2) / (2 * b * c), -1, 1)
    cosB = np.clip((a**2 + c**2 - b**2) / (2 * a * c), -1, 1)
    cosC = np.clip((a**2 + b**2 - c**2) / (2 * a * b), -1, 1)
    ang = np.degrees(np.arccos(np.stack([cosA, cosB, cosC], axis=1)))
    return ang.min()


def _nested_ceil(x):
    """Smallest ``q * 2**p >= x`` with ``q`` in 4..7 (plain ceil below 4).

    The set is closed under doubling, so halving the target size doubles the
    ray and layer counts exactly and the refined O-grid nests the coarse one.
    """
    if x <= 4:
        return max(1, math.ceil(x - 1e-12))
    p = 2 ** max(0, math.floor(math.log2(x / 4)))
    q = math.ceil(x / p - 1e-12)
    while q > 7:
        p *= 2
        q = math.ceil(x / p - 1e-12)
    return q * p


def _wedge_size(r, h, graded, slack=1.05):
    m = _nested_ceil(slack / (2 * h))
    if graded:
        # largest radial step is the outermost one on the diagonal ray
        q = math.log(math.sqrt(0.5) / r)
        k = _nested_ceil(q / math.log1p(h / (slack * math.sqrt(0.5))))
    else:
        k = _nested_ceil(slack * (math.sqrt(0.5) - r) / h)
    return m, k


def generate_cell_mesh(hole_radius, target_h):
    """Mesh of the liquid cell part ``(0,1)^2`` minus the centered disk of radius ``hole_radius``.

    Outer sides carry PERIODIC_X (x1 = 0 or 1) and PERIODIC_Y (x2 = 0 or 1)
    tags with matching node positions; the disk boundary is tagged HOLE.
    ``hole_radius == 0`` gives an unperforated periodic square.
    """
    r = float(hole_radius)
    _check_radius(r)
    if not target_h > 0:
        raise MeshError("target_h must be positive")
    h = float(target_h)
    slack = 1.05
    for _ in range(8):
        if r == 0:
            n = 2 * max(1, math.ceil(1 / (2 * h)))
            pts, tris = _union_jack(n)
            pts = pts + 0.5
            tris = _orient(pts, tris)
        else:
            best = None
            for graded in (False, True):
                m, k = _wedge_size(r, h, graded, slack)
                wp, wt = _wedge(r, m, k, graded)
                allp = np.vstack([wp @ g.T for g in _D4]) + 0.0
                allt = np.vstack([wt + i * len(wp) for i in range(len(_D4))])
                v, t = _dedupe(allp, allt)
                v = v + 0.5
                t = _orient(v, t)
                q = _min_angle_deg(v, t)
                if best is None or q > best[0] + 1e-9:
                    best = (q, v, t)
            _, pts, tris = best
        bedges = _boundary_edges(tris)
        tags = _cell_tags(pts, bedges, r)
        mesh = Mesh(pts, tris, bedges, tags)
        if mesh.h_max <= 1.5 * h:
            break
        slack *= 1.1
    else:  # pragma: no cover - the O-grid always meets the bound after a few passes
        raise MeshError("could not satisfy h_max <= 1.5 target_h")
    mesh.validate()
    periodic_pairs(mesh)
    return mesh


def unit_square_mesh(n):
    """Unperforated ``(0,1)^2`` with ``n`` (even) intervals per side, EXTERIOR-tagged."""
    if n < 2 or n % 2:
        raise MeshError("n must be an even integer >= 2")
    pts, tris = _union_jack(n)
    pts = pts + 0.5
    tris = _orient(pts, tris)
    bedges = _boundary_edges(tris)
    return Mesh(pts, tris, bedges, np.full(len(bedges), EXTERIOR, dtype=object))


def periodic_pairs(mesh, tol=1e-10):
    """Partner maps across opposite cell sides.

    Returns two dicts ``(pairs_x, pairs_y)``. ``pairs_x`` maps every vertex on
    x1 = 0 to the vertex on x1 = 1 with the same x2 and vice versa (an
    involution); ``pairs_y`` likewise for x2.
    """
    v = mesh.vertices
    out = []
    for axis, tag in ((0, PERIODIC_X), (1, PERIODIC_Y)):
        ids = mesh.vertices_with_tag(tag)
        lo = ids[np.abs(v[ids, axis]) < tol]
        hi = ids[np.abs(v[ids, axis] - 1.0) < tol]
        if len(lo) != len(hi):
            raise MeshError(f"periodic side vertex counts differ along axis {axis}: {len(lo)} vs {len(hi)}")
        other = 1 - axis
        lo = lo[np.argsort(v[lo, other], kind="stable")]
        hi = hi[np.argsort(v[hi, other], kind="stable")]
        mismatch = np.abs(v[lo, other] - v[hi, other])
        if mismatch.size and mismatch.max() > tol:
            raise MeshError(f"unmatched periodic vertex along axis {axis} (offset {mismatch.max():.3e})")
        pairs = {}
        for a, b in zip(lo.tolist(), hi.tolist()):
            pairs[a] = b
            pairs[b] = a
        out.append(pairs)
    return tuple(out)


# --------------------------------------------------------------------------
# perforated macro meshes
# --------------------------------------------------------------------------


def tile_cell_mesh(cell, epsilon):
    """Tile ``(1/epsilon)^2`` scaled copies of a cell mesh over the unit square."""
    N = _cells_per_side(epsilon)
    eps = 1.0 / N
    nv = cell.n_vertices
    ki, li = np.meshgrid(np.arange(N), np.arange(N), indexing="xy")
    offsets = np.stack([ki.ravel(), li.ravel()], axis=1).astype(float)
    allp = ((cell.vertices[None, :, :] + offsets[:, None, :]) * eps).reshape(-1, 2)
    shift = (np.arange(N * N) * nv)[:, None, None]
    allt = (cell.triangles[None, :, :] + shift).reshape(-1, 3)

    # only nodes on cell sides can coincide; key them on the (scaled) position
    keys = np.round(allp * N * 1e9).astype(np.int64)
    uniq, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.ravel()
    verts = allp[first]
    tris = inverse[allt]

    edges, tags = [], []
    cv = cell.vertices
    for tag in (HOLE, PERIODIC_X, PERIODIC_Y):
        ce = cell.edges_with_tag(tag)
        if len(ce) == 0:
            continue
        for (k, l), off in zip(offsets.astype(int), np.arange(N * N) * nv):
            if tag == HOLE:
                sel = ce
            else:
                axis = 0 if tag == PERIODIC_X else 1
                c = cv[ce[:, 0], axis]
                pos = (k, l)[axis]
                keep = ((np.abs(c) < _BTOL) & (pos == 0)) | ((np.abs(c - 1) < _BTOL) & (pos == N - 1))
                sel = ce[keep]
            if len(sel):
                edges.append(inverse[sel + off])
                tags += [HOLE if tag == HOLE else EXTERIOR] * len(sel)
    bedges = np.vstack(edges) if edges else np.zeros((0, 2), dtype=np.int64)
    mesh = Mesh(verts, tris, bedges, np.array(tags, dtype=object))
    return mesh


def generate_perforated_mesh(spec):
    """Mesh of the perforated square for a :class:`GeometrySpec`.

    Holes of radius ``epsilon * r`` sit at ``epsilon (k + 1/2, l + 1/2)``; the
    outer square is tagged EXTERIOR and the hole boundaries HOLE.
    """
    spec.validate()
    cell = generate_cell_mesh(spec.hole_radius, spec.target_h / spec.epsilon)
    mesh = tile_cell_mesh(cell, spec.epsilon)
    mesh.validate()
    return mesh


# --------------------------------------------------------------------------
# quality and file format
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class QualityReport:
    min_angle: float
    max_aspect_ratio: float
    h_max: float
    n_vertices: int = 0
    n_triangles: int = 0
    details: dict = field(default_factory=dict)


def mesh_quality(mesh):
    """Minimum interior angle (degrees), maximum aspect ratio R/(2 r_in) and ``h_max``.

    Raises :class:`MeshError` naming the offending triangles when any triangle
    has zero or negative area.
    """
    areas = mesh.signed_areas()
    bad = np.flatnonzero(areas <= 1e-300)
    if bad.size:
        raise MeshError(f"degenerate or inverted triangles at indices {bad.tolist()[:20]}")
    p = mesh.vertices[mesh.triangles]
    a = np.linalg.norm(p[:, 1] - p[:, 2], axis=1)
    b = np.linalg.norm(p[:, 2] - p[:, 0], axis=1)
    c = np.linalg.norm(p[:, 0] - p[:, 1], axis=1)
    s = 0.5 * (a + b + c)
    inradius = areas / s
    circumradius = a * b * c / (4 * areas)
    return QualityReport(
        min_angle=float(_min_angle_deg(mesh.vertices, mesh.triangles)),
        max_aspect_ratio=float((circumradius / (2 * inradius)).max()),
        h_max=mesh.h_max,
        n_vertices=mesh.n_vertices,
        n_triangles=mesh.n_triangles,
    )


def write_mesh(mesh, path):
    with open(path, "w") as fh:
        fh.write(f"VERTICES {mesh.n_vertices}\n")
        for x, y in mesh.vertices:
            fh.write(f"{float(x)!r} {float(y)!r}\n")
        fh.write(f"TRIANGLES {mesh.n_triangles}\n")
        for a, b, c in mesh.triangles:
            fh.write(f"{a} {b} {c}\n")
        fh.write(f"BOUNDARY {len(mesh.boundary_edges)}\n")
        for (a, b), tag in zip(mesh.boundary_edges, mesh.boundary_tags):
            fh.write(f"{a} {b} {tag}\n")


def read_mesh(path):
    with open(path) as fh:
        lines = [ln.split() for ln in fh if ln.strip()]
    sections, i = {}, 0
    while i < len(lines):
        name, count = lines[i][0], int(lines[i][1])
        sections[name] = lines[i + 1 : i + 1 + count]
        i += 1 + count
    try:
        verts = np.array([[float(x), float(y)] for x, y in sections["VERTICES"]])
        tris = np.array([[int(v) for v in row] for row in sections["TRIANGLES"]], dtype=np.int64)
        bnd = sections["BOUNDARY"]
    except KeyError as exc:
        raise MeshError(f"mesh file {path} lacks section {exc.args[0]}") from None
    edges = np.array([[int(a), int(b)] for a, b, _ in bnd], dtype=np.int64).reshape(-1, 2)
    tags = np.array([t for _, _, t in bnd], dtype=object)
    return Mesh(verts, tris, edges, tags)


def hole_segments(epsilon, hole_radius, target_h):
    """Minimum number of polygon segments for a hole: ceil(2 pi epsilon r / h)."""
    return math.ceil(2 * math.pi * epsilon * hole_radius / target_h)
