"""Stabilized linearization scheme for the semilinear micro problem.

Find ``u`` in the perforated domain, vanishing on the exterior boundary, with

    a(u, phi) + eps^alpha <R(u), phi>_vol + eps^beta <S(u), phi>_surf = <f, phi>_vol

for all test functions.  Starting from ``u^0 = 0`` the scheme solves

    a(u^k, phi) + L <u^k, phi>_surf + M <u^k, phi>_vol
        = <f, phi>_vol + L <u^{k-1}, phi>_surf + M <u^{k-1}, phi>_vol
          - eps^beta <S(u^{k-1}), phi>_surf - eps^alpha <R(u^{k-1}), phi>_vol

with constants ``L``, ``M`` fixed across iterations.  The iteration matrix is
therefore assembled (and preconditioned) once.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .assembly import AssembledSystem, apply_dirichlet, assemble_stiffness, assemble_system
from .linalg import ConvergenceError, cg_solve, jacobi

log = logging.getLogger(__name__)


class ConfigurationError(ValueError):
    pass


class ReactionWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ReactionSpec:
    """Volume reaction ``R`` and surface reaction ``S`` with derivative bounds.

    ``S=None`` switches the surface reaction off entirely (no surface term in
    the equation, hence no surface stabilization).
    """

    R: Callable
    S: Optional[Callable]
    delta0: float
    delta1: float
    name: str = "R,S"

    def __post_init__(self):
        if not (self.delta0 > 0 and self.delta1 >= self.delta0):
            raise ConfigurationError(f"need 0 < delta0 <= delta1, got delta0={self.delta0}, delta1={self.delta1}")

    @property
    def has_surface(self):
        return self.S is not None

    def check(self, lo=-10.0, hi=10.0, n=401, rtol=1e-6):
        """Sample difference quotients of R and S; warn (not raise) on violations.

        Returns the list of offending function names.
        """
        z = np.linspace(lo, hi, n)
        bad = []
        for nm, fn in (("R", self.R), ("S", self.S)):
            if fn is None:
                continue
            dq = np.diff(fn(z)) / np.diff(z)
            if dq.min() < self.delta0 * (1 - rtol) or dq.max() > self.delta1 * (1 + rtol):
                bad.append(nm)
                warnings.warn(
                    f"difference quotients of {nm} span [{dq.min():.6g}, {dq.max():.6g}], "
                    f"outside declared [{self.delta0}, {self.delta1}]",
                    ReactionWarning,
                    stacklevel=2,
                )
        return bad


def linear_reactions(C1=1.0, C2=1.0):
    """``R(z) = C1 z``, ``S(z) = C2 z``; ``C2 = 0`` drops the surface reaction."""
    if C1 <= 0:
        raise ConfigurationError(f"C1 must be > 0, got {C1}")
    if C2 < 0:
        raise ConfigurationError(f"C2 must be >= 0, got {C2}")
    S = (lambda z: C2 * np.asarray(z)) if C2 > 0 else None
    lo = min(C1, C2) if C2 > 0 else C1
    hi = max(C1, C2)
    return ReactionSpec(lambda z: C1 * np.asarray(z), S, lo, hi, f"linear(C1={C1:g},C2={C2:g})")


def tanh_reactions(c=0.1):
    """``R(z) = S(z) = z + c tanh(z)`` with bounds ``[1, 1 + c]``."""
    fn = lambda z: np.asarray(z) + c * np.tanh(z)  # noqa: E731
    return ReactionSpec(fn, fn, 1.0, 1.0 + c, f"z+{c:g}tanh(z)")


def choose_stabilization(alpha, beta, delta0, delta1, epsilon):
    """Stabilization constants ``(L, M)``.

    ``alpha <= beta``: ``L = d1 e^a + d0 (e^a - e^b)``, ``M = d1 e^a``;
    ``alpha >= beta``: ``L = d1 e^b``, ``M = d1 e^b + d0 (e^b - e^a)``.
    """
    if delta0 <= 0:
        raise ConfigurationError(f"delta0 must be positive, got {delta0}")
    if delta1 < delta0:
        raise ConfigurationError(f"delta1 ({delta1}) must be >= delta0 ({delta0})")
    if epsilon <= 0:
        raise ConfigurationError(f"epsilon must be positive, got {epsilon}")
    ea, eb = epsilon**alpha, epsilon**beta
    if alpha <= beta:
        L = delta1 * ea + delta0 * (ea - eb)
        M = delta1 * ea
    else:
        L = delta1 * eb
        M = delta1 * eb + delta0 * (eb - ea)
    return L, M


def contraction_factor(L, M, delta0, alpha, beta, epsilon, surface=True):
    """Contraction bound ``eta`` of the scheme.

    ``eta^2`` is the largest of ``(L - d0 e^b)/(L + d0 e^b)``,
    ``(L - d0 e^b)/(M + d0 e^a)``, ``(M - d0 e^a)/(M + d0 e^a)`` and
    ``(M - d0 e^a)/(L + d0 e^b)``.  Without a surface reaction only the
    volume quotient remains.
    """
    ea, eb = delta0 * epsilon**alpha, delta0 * epsilon**beta
    if surface:
        q = [(L - eb) / (L + eb), (L - eb) / (M + ea), (M - ea) / (M + ea), (M - ea) / (L + eb)]
    else:
        q = [(M - ea) / (M + ea)]
    q = max(q)
    if q < -1e-14:
        raise ConfigurationError(f"stabilization below the reaction bound (eta^2 = {q:.3g} < 0)")
    eta = math.sqrt(max(q, 0.0))
    if eta >= 1.0:
        raise ConfigurationError(f"contraction factor eta = {eta:.6g} >= 1; stabilization violated")
    return eta


@dataclass
class ScalingConfig:
    """Scaling exponents and stabilization of one micro solve."""

    epsilon: float
    alpha: float
    beta: float
    L: float
    M: float
    eta: float
    delta0: float = 1.0
    delta1: float = 1.0
    surface: bool = True

    @classmethod
    def build(cls, epsilon, alpha, beta, delta0, delta1, surface=True):
        if surface:
            L, M = choose_stabilization(alpha, beta, delta0, delta1, epsilon)
        else:
            choose_stabilization(alpha, alpha, delta0, delta1, epsilon)  # argument checks
            L, M = 0.0, delta1 * epsilon**alpha
        eta = contraction_factor(L, M, delta0, alpha, beta, epsilon, surface)
        cfg = cls(epsilon, alpha, beta, L, M, eta, delta0, delta1, surface)
        cfg.validate()
        return cfg

    @classmethod
    def for_reactions(cls, epsilon, alpha, beta, reactions):
        return cls.build(epsilon, alpha, beta, reactions.delta0, reactions.delta1, reactions.has_surface)

    @property
    def eps_alpha(self):
        return self.epsilon**self.alpha

    @property
    def eps_beta(self):
        return self.epsilon**self.beta

    def validate(self, rtol=1e-12):
        if not 0 <= self.eta < 1:
            raise ConfigurationError(f"eta must lie in [0, 1), got {self.eta}")
        if self.M < self.delta1 * self.eps_alpha * (1 - rtol):
            raise ConfigurationError(f"M = {self.M:.6g} < delta1 eps^alpha = {self.delta1 * self.eps_alpha:.6g}")
        if self.surface and self.L < self.delta1 * self.eps_beta * (1 - rtol):
            raise ConfigurationError(f"L = {self.L:.6g} < delta1 eps^beta = {self.delta1 * self.eps_beta:.6g}")

    def bounds_ratio(self):
        """``L / (e^a + e^b)`` and ``M / (e^a + e^b)``; bounded above and below uniformly in eps."""
        s = self.eps_alpha + self.eps_beta
        return self.L / s, self.M / s


@dataclass
class IterationTrace:
    """Increment norms ``v^k = u^k - u^{k-1}`` per iteration."""

    l2_volume: list = field(default_factory=list)
    l2_surface: list = field(default_factory=list)
    h1_semi: list = field(default_factory=list)
    w_norm: list = field(default_factory=list)
    ratios: list = field(default_factory=list)  # rho_k for k >= 2
    cg_iterations: list = field(default_factory=list)
    eta: float = float("nan")
    residual: float = float("nan")
    converged: bool = False

    @property
    def iterations(self):
        return len(self.w_norm)

    def append(self, l2v, l2s, h1, w, cg_it):
        if self.w_norm:
            prev = self.w_norm[-1]
            self.ratios.append(w / prev if prev > 0 else 0.0)
        self.l2_volume.append(l2v)
        self.l2_surface.append(l2s)
        self.h1_semi.append(h1)
        self.w_norm.append(w)
        self.cg_iterations.append(cg_it)

    def max_ratio(self):
        return max(self.ratios) if self.ratios else 0.0


def iteration_bound(eta, first_norm, tol):
    """Iterations needed for ``eta^k * ||u^1|| <= tol`` plus two."""
    if first_norm <= tol:
        return 1 + 2
    if eta <= 0:
        return 1 + 2
    return math.ceil(math.log(tol / first_norm) / math.log(eta)) + 2


class MicroProblem:
    """Dirichlet-reduced operators for one micro configuration.

    Holds the oscillatory stiffness, the mass matrices, the ``A = I``
    stiffness used by the norms, and the assembled iteration matrix.
    """

    def __init__(self, mesh, A_eps, config: ScalingConfig, f=1.0, quad_order=3, system: AssembledSystem | None = None):
        self.mesh = mesh
        self.config = config
        full = assemble_system(mesh, A_eps, f, quad_order) if system is None else system
        self.reduced = apply_dirichlet(full)
        if self.reduced.n == 0:
            raise ConfigurationError("mesh has no interior degrees of freedom")
        red = self.reduced
        self.K = red.stiffness
        self.Mv = red.mass_volume
        self.Ms = red.mass_surface
        self.F = red.load
        self.K_I = red.restrict(assemble_stiffness(mesh, None))
        c = config
        self.K_it = (self.K + c.L * self.Ms + c.M * self.Mv).tocsr()
        self.inv_diag = jacobi(self.K_it)
        self.w_scale = c.eps_alpha + c.eps_beta

    # norms of reduced vectors
    def norms(self, v):
        l2v = math.sqrt(max(v @ (self.Mv @ v), 0.0))
        l2s = math.sqrt(max(v @ (self.Ms @ v), 0.0))
        h1 = math.sqrt(max(v @ (self.K_I @ v), 0.0))
        w = math.sqrt(h1 * h1 + self.w_scale * (l2v * l2v + l2s * l2s))
        return l2v, l2s, h1, w

    def w_norm(self, v):
        return self.norms(v)[3]

    def residual(self, u, reactions):
        """Nonlinear weak-form residual against every free basis function."""
        c = self.config
        r = self.F - self.K @ u - c.eps_alpha * (self.Mv @ reactions.R(u))
        if reactions.has_surface:
            r -= c.eps_beta * (self.Ms @ reactions.S(u))
        return r

    def step_rhs(self, u_prev, reactions):
        c = self.config
        rhs = self.F + c.L * (self.Ms @ u_prev) + c.M * (self.Mv @ u_prev)
        rhs -= c.eps_alpha * (self.Mv @ reactions.R(u_prev))
        if reactions.has_surface:
            rhs -= c.eps_beta * (self.Ms @ reactions.S(u_prev))
        return rhs

    def extend(self, u):
        return self.reduced.extend(u)


def linearized_step(problem: MicroProblem, reactions, u_prev, tol=1e-12, x0=None):
    """One step of the scheme: solve ``K_it u = rhs(u_prev)`` by Jacobi-PCG."""
    rhs = problem.step_rhs(u_prev, reactions)
    res = cg_solve(problem.K_it, rhs, tol=tol, x0=u_prev if x0 is None else x0, inv_diag=problem.inv_diag,
                   max_iter=10 * problem.K_it.shape[0] + 100)
    return res.x


def solve_micro(mesh, A_eps, config, reactions, f=1.0, tol_fixpoint=1e-10, max_iter=5000, cg_tol=1e-8,
                problem: MicroProblem | None = None, check_reactions=True):
    """Run the scheme from ``u^0 = 0`` until ``||u^k - u^{k-1}||_W <= tol_fixpoint``.

    Each step is solved in increment form ``K_it v^k = r(u^{k-1})`` (the
    nonlinear residual), which is algebraically the step above but lets the
    inner CG tolerance be relative to a shrinking right-hand side.

    Returns ``(u, trace)`` with ``u`` on all mesh vertices (zeros on the
    exterior boundary).
    """
    if check_reactions:
        reactions.check()
    prob = MicroProblem(mesh, A_eps, config, f) if problem is None else problem
    u = np.zeros(prob.K.shape[0])
    trace = IterationTrace(eta=config.eta)
    v_prev = None
    for k in range(1, max_iter + 1):
        r = prob.residual(u, reactions)
        if not np.any(r):
            v = np.zeros_like(u)
            cg_it = 0
        else:
            guess = None
            if v_prev is not None and trace.ratios:
                guess = trace.ratios[-1] * v_prev
            sol = cg_solve(prob.K_it, r, tol=cg_tol, x0=guess, inv_diag=prob.inv_diag,
                           max_iter=10 * len(r) + 100)
            v, cg_it = sol.x, sol.iterations
        u = u + v
        trace.append(*prob.norms(v), cg_it)
        v_prev = v
        if trace.w_norm[-1] <= tol_fixpoint:
            trace.converged = True
            break
    res = prob.residual(u, reactions)
    trace.residual = float(np.max(np.abs(res))) if res.size else 0.0
    if not trace.converged:
        ratios = ", ".join(f"{x:.3g}" for x in trace.ratios[-5:])
        raise ConvergenceError(
            f"linearization did not reach {tol_fixpoint:g} in {max_iter} iterations "
            f"(last increment {trace.w_norm[-1]:.3e}; recent ratios [{ratios}] vs eta = {config.eta:.4g})",
            iterations=max_iter,
            residual=trace.w_norm[-1],
        )
    if trace.residual > 10 * tol_fixpoint:
        log.warning("nonlinear residual %.3e exceeds 10 x tol_fixpoint", trace.residual)
    return prob.extend(u), trace


def solve_linear_direct(mesh, A_eps, config, C1=1.0, C2=1.0, f=1.0, tol=1e-12, problem=None):
    """One-shot solve of the linear problem ``(K + C1 e^a Mv + C2 e^b Ms) u = F``."""
    prob = MicroProblem(mesh, A_eps, config, f) if problem is None else problem
    Kd = (prob.K + C1 * config.eps_alpha * prob.Mv + C2 * config.eps_beta * prob.Ms).tocsr()
    sol = cg_solve(Kd, prob.F, tol=tol, max_iter=20 * Kd.shape[0] + 100)
    return prob.extend(sol.x)
