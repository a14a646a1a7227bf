import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from perfhom.assembly import (
    AssembledSystem,
    AssemblyError,
    CoefficientField,
    apply_dirichlet,
    apply_periodic,
    assemble_load,
    assemble_mass_surface,
    assemble_mass_volume,
    assemble_stiffness,
    assemble_system,
    constant_coefficient,
    periodic_prolongation,
    tensor_coefficient,
)
from perfhom.linalg import cg_solve, csr_from_triplets, is_symmetric
from perfhom.mesh import EXTERIOR, GeometrySpec, Mesh, generate_cell_mesh, generate_perforated_mesh, unit_square_mesh

POROSITY_04 = 1 - math.pi * 0.16


@pytest.fixture(scope="module")
def tri():
    return Mesh([[0, 0], [1, 0], [0, 1]], [[0, 1, 2]], [[0, 1], [1, 2], [2, 0]], [EXTERIOR] * 3)


@pytest.fixture(scope="module")
def single_cell():
    return generate_perforated_mesh(GeometrySpec(1.0, 0.4, 1 / 64))


@pytest.fixture(scope="module")
def square():
    return unit_square_mesh(16)


class TestStiffness:
    def test_reference_triangle(self, tri):
        K = assemble_stiffness(tri, constant_coefficient(1.0)).toarray()
        np.testing.assert_allclose(K, 0.5 * np.array([[2, -1, -1], [-1, 1, 0], [-1, 0, 1]]), atol=1e-15)

    def test_identity_default(self, tri):
        np.testing.assert_allclose(assemble_stiffness(tri).toarray(), assemble_stiffness(tri, constant_coefficient()).toarray())

    def test_linear_in_constant(self, square):
        K1 = assemble_stiffness(square, constant_coefficient(1.0))
        K3 = assemble_stiffness(square, constant_coefficient(3.7))
        assert abs(K3 - 3.7 * K1).max() < 1e-12

    def test_constants_in_kernel(self, square, osc):
        K = assemble_stiffness(square, osc.scaled(0.25))
        np.testing.assert_allclose(K @ np.ones(square.n_vertices), 0.0, atol=1e-12)

    def test_symmetric(self, single_cell, osc):
        assert is_symmetric(assemble_stiffness(single_cell, osc))

    def test_linear_patch(self, square):
        # linear fields carry exact fluxes: interior residual vanishes
        K = assemble_stiffness(square)
        u = 2 * square.vertices[:, 0] - 0.5 * square.vertices[:, 1] + 1
        interior = np.setdiff1d(np.arange(square.n_vertices), square.vertices_with_tag(EXTERIOR))
        assert np.abs((K @ u)[interior]).max() < 1e-10

    def test_quadrature_orders_agree(self):
        coef = CoefficientField(lambda x: 1 + 0.5 * np.sin(x[:, 0]) * np.cos(x[:, 1]), 0.5, 1.5)
        diffs = []
        for n in (8, 16):
            m = unit_square_mesh(n)
            diffs.append(abs(assemble_stiffness(m, coef, 1) - assemble_stiffness(m, coef, 3)).max())
        assert diffs[1] < diffs[0] / 3

    def test_non_elliptic_names_point(self, tri):
        bad = CoefficientField(lambda x: 1.0 - 2.0 * x[:, 0], 0.1, 2.0, "bad")
        with pytest.raises(AssemblyError, match="quadrature point"):
            assemble_stiffness(tri, bad)

    def test_tensor_coefficient(self, tri):
        A = tensor_coefficient([[2.0, 0.5], [0.5, 1.0]])
        K = assemble_stiffness(tri, A)
        assert is_symmetric(K)
        with pytest.raises(AssemblyError):
            tensor_coefficient([[1.0, 0.0], [0.0, -1.0]])

    def test_bad_order(self, tri):
        with pytest.raises(AssemblyError):
            assemble_stiffness(tri, None, quad_order=2)


class TestMass:
    def test_reference_local(self, tri):
        M = assemble_mass_volume(tri).toarray()
        np.testing.assert_allclose(M, 0.5 / 12 * np.array([[2, 1, 1], [1, 2, 1], [1, 1, 2]]))

    def test_unit_square_sum(self, square):
        assert assemble_mass_volume(square).sum() == pytest.approx(1.0, abs=1e-12)

    def test_perforated_sum(self, single_cell):
        assert assemble_mass_volume(single_cell).sum() == pytest.approx(POROSITY_04, rel=1e-3)

    def test_spd(self, single_cell):
        M = assemble_mass_volume(single_cell)
        assert is_symmetric(M)
        assert np.linalg.eigvalsh(M.toarray()[:200, :200]).min() > 0

    def test_surface_single_edge(self):
        m = Mesh([[0, 0], [3, 0], [0, 1]], [[0, 1, 2]], [[0, 1], [1, 2], [2, 0]], ["HOLE", EXTERIOR, EXTERIOR])
        Ms = assemble_mass_surface(m).toarray()
        np.testing.assert_allclose(Ms[:2, :2], 3 / 6 * np.array([[2, 1], [1, 2]]))
        assert not Ms[2].any() and not Ms[:, 2].any()

    def test_surface_zero_without_holes(self):
        assert assemble_mass_surface(generate_cell_mesh(0.0, 1 / 8)).nnz == 0

    def test_surface_perimeter(self, single_cell):
        assert assemble_mass_surface(single_cell).sum() == pytest.approx(2 * math.pi * 0.4, rel=1e-2)

    def test_surface_off_hole_rows_vanish(self, single_cell):
        Ms = assemble_mass_surface(single_cell)
        off = np.setdiff1d(np.arange(single_cell.n_vertices), single_cell.vertices_with_tag("HOLE"))
        assert abs(Ms[off]).sum() == 0


class TestLoad:
    def test_zero(self, square):
        assert not assemble_load(square, 0.0).any()

    def test_unit_square(self, square):
        assert assemble_load(square, 1.0).sum() == pytest.approx(1.0, abs=1e-12)

    def test_perforated(self, single_cell):
        assert assemble_load(single_cell, 1.0).sum() == pytest.approx(POROSITY_04, rel=1e-3)

    def test_callable_matches_constant(self, square):
        np.testing.assert_allclose(assemble_load(square, lambda x: np.full(len(x), 2.0)), assemble_load(square, 2.0))

    def test_linear_source_exact(self, square):
        # int x1 dx over the unit square is 1/2; 3-point rule is exact for P1 * P1
        b = assemble_load(square, lambda x: x[:, 0])
        assert b.sum() == pytest.approx(0.5, abs=1e-12)


class TestDirichlet:
    def test_all_dirichlet(self, tri):
        sys_ = assemble_system(tri)
        red = apply_dirichlet(sys_)
        assert red.n == 0
        np.testing.assert_array_equal(red.extend(np.zeros(0)), np.zeros(3))

    def test_chain_1d(self):
        # three-node chain, stiffness of -u'' with unit spacing, ends fixed
        K = csr_from_triplets(3, [(0, 0, 1), (0, 1, -1), (1, 0, -1), (1, 1, 2), (1, 2, -1), (2, 1, -1), (2, 2, 1)])
        empty = csr_from_triplets(3, [])
        sys_ = AssembledSystem(K, sp.identity(3, format="csr"), empty, np.array([0.0, 1.0, 0.0]), np.array([0, 2]))
        red = apply_dirichlet(sys_)
        assert red.stiffness.shape == (1, 1)
        assert red.stiffness[0, 0] == 2.0
        assert red.load.tolist() == [1.0]
        np.testing.assert_array_equal(red.extend([0.5]), [0.0, 0.5, 0.0])

    def test_reduced_spd_probe(self, square):
        red = apply_dirichlet(assemble_system(square))
        b = np.random.default_rng(1).normal(size=red.n)
        x, _, _ = cg_solve(red.stiffness, b, tol=1e-10)
        assert np.linalg.norm(red.stiffness @ x - b) <= 1e-10 * np.linalg.norm(b) * 1.0001

    def test_extension_exact_zeros(self, single_cell):
        red = apply_dirichlet(assemble_system(single_cell))
        u = red.extend(np.ones(red.n))
        assert not u[single_cell.vertices_with_tag(EXTERIOR)].any()

    def test_dimension_check(self, square):
        red = apply_dirichlet(assemble_system(square))
        with pytest.raises(ValueError):
            red.extend(np.ones(red.n + 1))


@pytest.fixture(scope="module")
def cell():
    return generate_cell_mesh(0.4, 1 / 16)


class TestPeriodic:
    def test_constants_reproduced(self, cell):
        P = periodic_prolongation(cell)
        np.testing.assert_array_equal(P @ np.ones(P.shape[1]), np.ones(cell.n_vertices))

    def test_folded_symmetric(self, cell, osc):
        red = apply_periodic(assemble_system(cell, osc), cell)
        asym = abs(red.stiffness - red.stiffness.T).max()
        assert asym < 1e-12

    def test_pinned_spd(self, cell, osc):
        red = apply_periodic(assemble_system(cell, osc), cell)
        assert np.linalg.eigvalsh(red.stiffness.toarray()).min() > 0

    def test_slave_pin_rejected(self, cell):
        right = int(np.flatnonzero(np.abs(cell.vertices[:, 0] - 1) < 1e-12)[0])
        with pytest.raises(AssemblyError):
            apply_periodic(assemble_system(cell), cell, pin=right)

    def test_periodic_fields_are_folded(self, cell):
        P = periodic_prolongation(cell)
        u = P @ np.random.default_rng(0).normal(size=P.shape[1])
        v = cell.vertices
        for axis in (0, 1):
            lo = np.flatnonzero(np.abs(v[:, axis]) < 1e-12)
            hi = np.flatnonzero(np.abs(v[:, axis] - 1) < 1e-12)
            lo = lo[np.argsort(v[lo, 1 - axis])]
            hi = hi[np.argsort(v[hi, 1 - axis])]
            np.testing.assert_array_equal(u[lo], u[hi])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_assembled_matrices_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(0.5, 2.0, 2)
    c = rng.uniform(-0.2, 0.2)
    coef = CoefficientField(lambda x: np.broadcast_to([[a, c], [c, b]], (len(x), 2, 2)), 0.1, 3.0)
    m = unit_square_mesh(6)
    for M in (assemble_stiffness(m, coef), assemble_mass_volume(m)):
        assert is_symmetric(M)
    K = assemble_stiffness(m, coef)
    np.testing.assert_allclose(K @ np.ones(m.n_vertices), 0.0, atol=1e-12)
