import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from perfhom.linalg import ConvergenceError
from perfhom.mesh import tile_cell_mesh
from perfhom.micro import (
    ConfigurationError,
    MicroProblem,
    ReactionSpec,
    ReactionWarning,
    ScalingConfig,
    choose_stabilization,
    contraction_factor,
    iteration_bound,
    linear_reactions,
    linearized_step,
    solve_linear_direct,
    solve_micro,
    tanh_reactions,
)


@pytest.fixture(scope="module")
def mesh4(coarse_cell_04):
    return tile_cell_mesh(coarse_cell_04, 0.25)


@pytest.fixture(scope="module")
def mesh8(coarse_cell_04):
    return tile_cell_mesh(coarse_cell_04, 0.125)


class TestStabilization:
    def test_alpha_below_beta(self):
        L, M = choose_stabilization(1, 2, 0.5, 1.0, 0.1)
        assert L == pytest.approx(0.145) and M == pytest.approx(0.1)

    def test_alpha_above_beta(self):
        L, M = choose_stabilization(2, 1, 0.5, 1.0, 0.1)
        assert L == pytest.approx(0.1) and M == pytest.approx(0.145)

    @pytest.mark.parametrize("a", [-1.0, 0.0, 0.5, 2.0])
    def test_branches_agree_at_equality(self, a):
        L, M = choose_stabilization(a, a, 0.5, 1.0, 0.2)
        assert L == pytest.approx(0.2**a) and M == pytest.approx(0.2**a)

    @pytest.mark.parametrize("args", [(1, 2, 0.0, 1.0, 0.1), (1, 2, -1.0, 1.0, 0.1), (1, 2, 0.5, 1.0, 0.0),
                                      (1, 2, 0.5, 1.0, -0.1), (1, 2, 1.0, 0.5, 0.1)])
    def test_rejects_bad_input(self, args):
        with pytest.raises(ConfigurationError):
            choose_stabilization(*args)

    @settings(max_examples=100, deadline=None)
    @given(a=st.floats(-2, 2), b=st.floats(-2, 2), d0=st.floats(0.1, 1), ratio=st.floats(1, 3),
           eps=st.sampled_from([0.5, 0.1, 0.01, 0.001]))
    def test_conditions_hold(self, a, b, d0, ratio, eps):
        d1 = d0 * ratio
        L, M = choose_stabilization(a, b, d0, d1, eps)
        assert L > 0 and M > 0
        assert L >= d1 * eps**b * (1 - 1e-12) and M >= d1 * eps**a * (1 - 1e-12)
        s = eps**a + eps**b
        # L, M comparable to eps^a + eps^b with eps-independent constants
        assert d1 / 2 * (1 - 1e-12) <= max(L, M) / s <= (d1 + d0) * (1 + 1e-12)
        assert 0 <= contraction_factor(L, M, d0, a, b, eps) < 1


class TestContraction:
    def test_equal_exponents(self):
        eta = contraction_factor(0.1, 0.1, 0.5, 1, 1, 0.1)
        assert eta == pytest.approx(math.sqrt(1 / 3))

    def test_zero_when_bounds_coincide(self):
        L, M = choose_stabilization(1, 1, 1.0, 1.0, 0.1)
        assert contraction_factor(L, M, 1.0, 1, 1, 0.1) == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("a", [-1.0, 0.0, 1.0, 2.0])
    def test_eps_independent_for_equal_exponents(self, a):
        etas = [contraction_factor(*choose_stabilization(a, a, 0.5, 1.0, e), 0.5, a, a, e) for e in (0.1, 0.01, 0.001)]
        assert max(etas) - min(etas) < 1e-12

    @pytest.mark.parametrize("a, b", [(1, 2), (2, 1), (-1, 1), (1, -1)])
    def test_closed_form_unequal_exponents(self, a, b):
        # with the stabilization above, eta^2 = 1 - 2 d0 eps^|b-a| / (d0 + d1)
        d0, d1 = 0.5, 1.0
        for e in (0.1, 0.01):
            L, M = choose_stabilization(a, b, d0, d1, e)
            eta = contraction_factor(L, M, d0, a, b, e)
            assert eta**2 == pytest.approx(1 - 2 * d0 * e ** abs(b - a) / (d0 + d1), rel=1e-12)

    def test_violated_stabilization(self):
        with pytest.raises(ConfigurationError):
            contraction_factor(0.01, 0.01, 1.0, 1, 1, 0.5)

    def test_volume_only(self):
        eta = contraction_factor(0.0, 1.1, 1.0, 0, 0, 1.0, surface=False)
        assert eta == pytest.approx(math.sqrt(0.1 / 2.1))


class TestScalingConfig:
    def test_build(self):
        cfg = ScalingConfig.build(0.1, 1, 2, 0.5, 1.0)
        assert (cfg.L, cfg.M) == pytest.approx((0.145, 0.1))
        assert 0 < cfg.eta < 1

    def test_validate_rejects_small_M(self):
        cfg = ScalingConfig(0.1, 1, 2, L=1.0, M=0.01, eta=0.5, delta0=0.5, delta1=1.0)
        with pytest.raises(ConfigurationError):
            cfg.validate()

    def test_no_surface(self):
        cfg = ScalingConfig.build(0.25, -2, 2, 1.0, 1.0, surface=False)
        assert cfg.L == 0 and cfg.M == pytest.approx(16.0) and cfg.eta == 0.0


class TestReactions:
    def test_tanh_within_bounds(self):
        assert tanh_reactions().check() == []

    def test_violation_warns(self):
        r = ReactionSpec(lambda z: 2 * z, lambda z: z, 1.0, 1.5)
        with pytest.warns(ReactionWarning):
            assert r.check() == ["R"]

    def test_linear_validation(self):
        with pytest.raises(ConfigurationError):
            linear_reactions(0.0, 1.0)
        with pytest.raises(ConfigurationError):
            linear_reactions(1.0, -1.0)
        assert not linear_reactions(1.0, 0.0).has_surface

    def test_bad_bounds(self):
        with pytest.raises(ConfigurationError):
            ReactionSpec(lambda z: z, None, 0.0, 1.0)


@pytest.fixture(scope="module")
def prob(mesh4, osc):
    cfg = ScalingConfig.build(0.25, 1, 1, 1.0, 1.0)
    return MicroProblem(mesh4, osc.scaled(0.25), cfg, f=1.0)


class TestStep:

    def test_identity_reactions_one_step(self, prob, mesh4, osc):
        rx = linear_reactions(1.0, 1.0)
        u1 = linearized_step(prob, rx, np.zeros(prob.K.shape[0]))
        direct = solve_linear_direct(mesh4, osc.scaled(0.25), prob.config, problem=prob)
        np.testing.assert_allclose(prob.extend(u1), direct, atol=1e-10)

    def test_fixed_point_preserved(self, prob, mesh4, osc):
        rx = linear_reactions(1.0, 1.0)
        direct = solve_linear_direct(mesh4, osc.scaled(0.25), prob.config, problem=prob)
        u_star = direct[prob.reduced.free_dofs]
        np.testing.assert_allclose(linearized_step(prob, rx, u_star), u_star, atol=1e-10)

    def test_zero_data(self, mesh4, osc):
        cfg = ScalingConfig.build(0.25, 1, 2, 1.0, 1.1)
        prob = MicroProblem(mesh4, osc.scaled(0.25), cfg, f=0.0)
        u = linearized_step(prob, tanh_reactions(), np.zeros(prob.K.shape[0]))
        assert not u.any()


class TestSolveMicro:
    def test_linear_matches_direct(self, mesh4, osc):
        cfg = ScalingConfig.build(0.25, 1, 2, 1.0, 1.0)
        rx = linear_reactions()
        u, trace = solve_micro(mesh4, osc.scaled(0.25), cfg, rx)
        direct = solve_linear_direct(mesh4, osc.scaled(0.25), cfg)
        assert np.abs(u - direct).max() <= 1e-8
        assert trace.converged and trace.residual <= 1e-9

    def test_zero_source(self, mesh4, osc):
        cfg = ScalingConfig.build(0.25, 1, 2, 1.0, 1.1)
        u, trace = solve_micro(mesh4, osc.scaled(0.25), cfg, tanh_reactions(), f=0.0)
        assert not u.any() and trace.iterations == 1

    @pytest.mark.parametrize("ab", [(1, 2), (0, 0), (2, 1)])
    def test_nonlinear_contraction(self, mesh8, osc, ab):
        rx = tanh_reactions(0.1)
        cfg = ScalingConfig.for_reactions(0.125, *ab, rx)
        u, tr = solve_micro(mesh8, osc.scaled(0.125), cfg, rx)
        assert all(r <= cfg.eta + 0.05 for r in tr.ratios)
        assert tr.iterations <= iteration_bound(cfg.eta, tr.w_norm[0], 1e-10) + 2
        gamma_lower = osc.gamma_lower
        factor = cfg.eta * math.sqrt((rx.delta1 + rx.delta0) / (2 * gamma_lower) + 1)
        assert all(b <= factor * a + 1e-14 for a, b in zip(tr.w_norm[1:], tr.w_norm[2:]))
        assert tr.residual <= 10 * 1e-10

    def test_trace_consistent(self, mesh4, osc):
        cfg = ScalingConfig.build(0.25, 1, 2, 1.0, 1.1)
        _, tr = solve_micro(mesh4, osc.scaled(0.25), cfg, tanh_reactions())
        n = tr.iterations
        assert len(tr.l2_volume) == len(tr.l2_surface) == len(tr.h1_semi) == n
        assert len(tr.ratios) == n - 1
        assert min(tr.l2_volume + tr.l2_surface + tr.h1_semi + tr.w_norm) >= 0
        assert tr.w_norm[-1] <= 1e-10

    def test_max_iter_diagnostic(self, mesh4, osc):
        cfg = ScalingConfig.build(0.25, 1, 2, 1.0, 1.0)
        with pytest.raises(ConvergenceError, match="eta"):
            solve_micro(mesh4, osc.scaled(0.25), cfg, linear_reactions(), max_iter=2)

    def test_energy_bounded_across_sweep(self, coarse_cell_04, osc):
        energies = []
        for eps in (0.25, 0.125, 0.0625):
            m = tile_cell_mesh(coarse_cell_04, eps)
            cfg = ScalingConfig.build(eps, 1, 2, 1.0, 1.0)
            prob = MicroProblem(m, osc.scaled(eps), cfg)
            u, _ = solve_micro(m, osc.scaled(eps), cfg, linear_reactions(), problem=prob)
            ur = u[prob.reduced.free_dofs]
            energies.append(prob.w_norm(ur) ** 2)
        assert max(energies) <= 2 * min(energies)


def test_iteration_bound():
    assert iteration_bound(0.5, 1.0, 1e-3) == math.ceil(math.log(1e-3) / math.log(0.5)) + 2
    assert iteration_bound(0.0, 1.0, 1e-3) == 3
