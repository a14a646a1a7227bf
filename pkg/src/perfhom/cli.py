"""Command-line harness: cell, micro, macro, sweep and compare runs.

Configuration is an INI file (``configparser``); an empty file gives the
reference setup: circular hole of radius 0.4, the oscillatory coefficient
``1 / (2 + cos(2 pi y1) cos(2 pi y2))``, ``f = 1`` and linear reactions
``R(z) = C1 z``, ``S(z) = C2 z`` with ``C1 = C2 = 1``.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .assembly import CoefficientField, constant_coefficient
from .cell import compute_cell, write_chi_csv, write_tensor_csv
from .linalg import ConvergenceError
from .macro import MacroProblem, solve_macro_linear, write_field_csv
from .mesh import GeometrySpec, generate_cell_mesh, tile_cell_mesh, unit_square_mesh
from .micro import ReactionSpec, ScalingConfig, linear_reactions, solve_micro, tanh_reactions
from .scaling import (
    ConvergenceRecord,
    ConvergenceRow,
    NormOperators,
    TriangleLocator,
    detect_regime,
    error_norms,
    predicted_rate,
    reconstruct_expansion,
    rms_nodal,
    trace_constant,
)

log = logging.getLogger("perfhom")

EXIT_PASS, EXIT_ERROR, EXIT_FAIL = 0, 1, 2


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

_SAFE = {
    name: getattr(np, name)
    for name in ("sin", "cos", "tan", "exp", "log", "sqrt", "tanh", "sinh", "cosh", "abs", "pi", "minimum", "maximum")
}


def compile_expression(expr, variables):
    """Compile a numpy expression in ``variables`` (e.g. ``("y1", "y2")``) into ``f(points)``."""
    try:
        code = compile(expr, "<expression>", "eval")
    except SyntaxError as exc:
        raise ConfigError(f"cannot parse expression {expr!r}: {exc.msg}") from None
    for name in code.co_names:
        if name not in _SAFE and name not in variables:
            raise ConfigError(f"expression {expr!r} uses unknown name {name!r}")

    def fn(x):
        x = np.asarray(x, dtype=float)
        ns = dict(_SAFE)
        ns.update({v: x[:, i] for i, v in enumerate(variables)})
        out = eval(code, {"__builtins__": {}}, ns)  # noqa: S307 - names checked above
        return np.broadcast_to(np.asarray(out, dtype=float), (len(x),)).copy()

    return fn


@dataclass
class RunConfig:
    # geometry
    hole_radius: float = 0.4
    eps: tuple = (0.25, 0.125, 0.0625, 0.03125)
    cell_h: float = 1 / 128  # cell mesh for the effective tensor (cmd_cell)
    micro_cell_h: float = 1 / 8  # cell mesh tiled into micro meshes, h = eps * micro_cell_h
    macro_n: int = 256
    # scaling
    alpha: float = 1.0
    beta: float = 2.0
    regime: str = "auto"
    theta: int = 2
    mu: float = 0.0
    # reactions
    reaction: str = "linear"  # linear | tanh
    C1: float = 1.0
    C2: float = 1.0
    tanh_c: float = 0.1
    delta0: float | None = None
    delta1: float | None = None
    # coefficient
    coefficient: str = "oscillatory"  # oscillatory | identity | laminate | expression
    coefficient_expression: str = ""
    gamma_lower: float | None = None
    gamma_upper: float | None = None
    # source
    f: str = "1"
    # solver
    tol_fixpoint: float = 1e-10
    cg_tol: float = 1e-8
    max_iter: int = 5000
    jobs: int = 1
    # output
    order: int = 1
    out: str = "out"
    seed: int = 0

    def validate(self):
        if not 0 <= self.hole_radius < 0.5:
            raise ConfigError(f"geometry.hole_radius: must lie in [0, 0.5), got {self.hole_radius}")
        if not self.eps:
            raise ConfigError("geometry.eps: empty list")
        for e in self.eps:
            if e <= 0 or abs(1 / e - round(1 / e)) > 1e-9:
                raise ConfigError(f"geometry.eps: 1/eps must be a positive integer, got eps={e}")
        if any(b >= a for a, b in zip(self.eps, self.eps[1:])):
            raise ConfigError(f"geometry.eps: must be strictly decreasing, got {list(self.eps)}")
        if self.micro_cell_h > 1 / 8:
            raise ConfigError(f"geometry.micro_cell_h: must be <= 1/8 (h <= eps/8), got {self.micro_cell_h}")
        if self.C1 <= 0:
            raise ConfigError(f"reaction.C1: must be > 0, got {self.C1}")
        if self.C2 < 0:
            raise ConfigError(f"reaction.C2: must be >= 0, got {self.C2}")
        if self.reaction not in ("linear", "tanh"):
            raise ConfigError(f"reaction.kind: expected linear or tanh, got {self.reaction!r}")
        if self.coefficient not in ("oscillatory", "identity", "laminate", "expression"):
            raise ConfigError(f"coefficient.kind: unknown coefficient {self.coefficient!r}")
        if self.coefficient == "expression":
            if not self.coefficient_expression:
                raise ConfigError("coefficient.expression: required for kind = expression")
            if self.gamma_lower is None or self.gamma_upper is None:
                raise ConfigError("coefficient.gamma_lower: bounds required for kind = expression")
        if self.order not in (0, 1):
            raise ConfigError(f"output.order: must be 0 or 1, got {self.order}")
        if self.regime != "auto":
            from .scaling import REGIMES

            if self.regime not in REGIMES:
                raise ConfigError(f"scaling.regime: unknown regime {self.regime!r}")
        return self

    # derived objects -------------------------------------------------------

    def coefficient_field(self):
        if self.coefficient == "identity":
            return constant_coefficient(1.0)
        if self.coefficient == "oscillatory":
            return CoefficientField(
                lambda y: 1.0 / (2.0 + np.cos(2 * np.pi * y[:, 0]) * np.cos(2 * np.pi * y[:, 1])), 1 / 3, 1.0,
                "oscillatory",
            )
        if self.coefficient == "laminate":
            return CoefficientField(lambda y: 1.0 / (2.0 + np.cos(2 * np.pi * y[:, 0])), 1 / 3, 1.0, "laminate")
        fn = compile_expression(self.coefficient_expression, ("y1", "y2"))
        return CoefficientField(fn, self.gamma_lower, self.gamma_upper, self.coefficient_expression)

    def source(self):
        try:
            return float(self.f)
        except ValueError:
            return compile_expression(self.f, ("x1", "x2"))

    def reactions(self) -> ReactionSpec:
        if self.reaction == "tanh":
            r = tanh_reactions(self.tanh_c)
        else:
            r = linear_reactions(self.C1, self.C2)
        if self.delta0 is not None or self.delta1 is not None:
            r = replace(r, delta0=self.delta0 or r.delta0, delta1=self.delta1 or r.delta1)
        return r

    def resolved_regime(self):
        if self.regime != "auto":
            return self.regime
        return detect_regime(self.alpha, self.beta, surface=self.reactions().has_surface)

    def decay_mode(self):
        """True when ``u_eps`` itself is measured (convergence to zero)."""
        return self.resolved_regime() in ("volume_neg", "surface_small", "combined_small", "combined_neg")

    def prediction(self):
        surface = self.decay_mode() and not self.reactions().has_surface
        return predicted_rate(self.resolved_regime(), self.alpha, self.beta, self.theta, self.mu, surface_norm=surface)

    def fit_column(self):
        return "err_surf" if (self.decay_mode() and not self.reactions().has_surface) else "err_l2"


# INI layout: section -> {key: (attribute, parser)}
def _float_list(s):
    return tuple(float(eval(t, {"__builtins__": {}}, {})) for t in s.replace(";", ",").split(",") if t.strip())  # noqa: S307


def _num(s):
    return float(eval(s, {"__builtins__": {}}, {}))  # allows 1/128  # noqa: S307


_SCHEMA = {
    "geometry": {
        "hole_radius": ("hole_radius", _num),
        "eps": ("eps", _float_list),
        "cell_h": ("cell_h", _num),
        "micro_cell_h": ("micro_cell_h", _num),
        "macro_n": ("macro_n", int),
    },
    "scaling": {
        "alpha": ("alpha", _num),
        "beta": ("beta", _num),
        "regime": ("regime", str),
        "theta": ("theta", int),
        "mu": ("mu", _num),
    },
    "reaction": {
        "kind": ("reaction", str),
        "c1": ("C1", _num),
        "c2": ("C2", _num),
        "tanh_c": ("tanh_c", _num),
        "delta0": ("delta0", _num),
        "delta1": ("delta1", _num),
    },
    "coefficient": {
        "kind": ("coefficient", str),
        "expression": ("coefficient_expression", str),
        "gamma_lower": ("gamma_lower", _num),
        "gamma_upper": ("gamma_upper", _num),
    },
    "source": {"f": ("f", str)},
    "solver": {
        "tol_fixpoint": ("tol_fixpoint", _num),
        "cg_tol": ("cg_tol", _num),
        "max_iter": ("max_iter", int),
        "jobs": ("jobs", int),
    },
    "output": {"dir": ("out", str), "order": ("order", int), "seed": ("seed", int)},
}


def parse_config(text) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    values = {}
    for section in cp.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in cp.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {section}.{key}")
            attr, conv = _SCHEMA[section][key]
            try:
                values[attr] = conv(raw)
            except Exception:  # noqa: BLE001 - reported with the key name
                raise ConfigError(f"invalid value for {section}.{key}: {raw!r}") from None
    return RunConfig(**values).validate()


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(p.read_text())


# --------------------------------------------------------------------------
# runs
# --------------------------------------------------------------------------


def _fmt(v):
    return f"{v:.6g}"


def run_cell(cfg: RunConfig, h=None):
    mesh = generate_cell_mesh(cfg.hole_radius, cfg.cell_h if h is None else h)
    return compute_cell(mesh, cfg.coefficient_field())


def cmd_cell(cfg: RunConfig):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    sol = run_cell(cfg)
    write_tensor_csv(sol.A_eff, out / "tensor.csv")
    write_chi_csv(sol, out / "chi.csv")
    with open(out / "porosity.csv", "w", newline="") as fh:
        csv.writer(fh).writerows([["porosity"], [_fmt(sol.porosity)]])
    log.info("A_eff = [[%s, %s], [%s, %s]], porosity %s", *map(_fmt, sol.A_eff.ravel()), _fmt(sol.porosity))
    return sol


@dataclass
class Context:
    """Shared pieces of a sweep: cell mesh, cell solution and macro solution."""

    cfg: RunConfig
    cell_mesh: object = None
    cell: object = None
    macro_mesh: object = None
    u0: np.ndarray = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def build(cls, cfg, need_macro=True):
        ctx = cls(cfg)
        ctx.cell_mesh = generate_cell_mesh(cfg.hole_radius, cfg.micro_cell_h)
        if need_macro:
            # effective tensor from the same cell mesh that is tiled into the micro meshes
            ctx.cell = compute_cell(ctx.cell_mesh, cfg.coefficient_field())
            ctx.macro_mesh = unit_square_mesh(cfg.macro_n)
            ctx.u0 = solve_macro_linear(ctx.macro_mesh, MacroProblem(ctx.cell.A_eff, ctx.cell.porosity, cfg.source()))
        return ctx


def micro_mesh(cfg, eps, cell_mesh=None):
    GeometrySpec(eps, cfg.hole_radius, eps * cfg.micro_cell_h).validate()
    cm = generate_cell_mesh(cfg.hole_radius, cfg.micro_cell_h) if cell_mesh is None else cell_mesh
    return tile_cell_mesh(cm, eps)


def solve_one(cfg: RunConfig, eps, mesh=None):
    """Micro solve at one ``eps``; returns ``(mesh, u, trace, config)``."""
    mesh = micro_mesh(cfg, eps) if mesh is None else mesh
    rx = cfg.reactions()
    sc = ScalingConfig.for_reactions(eps, cfg.alpha, cfg.beta, rx)
    u, trace = solve_micro(mesh, cfg.coefficient_field().scaled(eps), sc, rx, f=cfg.source(),
                           tol_fixpoint=cfg.tol_fixpoint, max_iter=cfg.max_iter, cg_tol=cfg.cg_tol)
    return mesh, u, trace, sc


def _sweep_row(args):
    cfg, eps, ctx = args
    mesh = tile_cell_mesh(ctx.cell_mesh, eps)
    mesh, u, trace, sc = solve_one(cfg, eps, mesh)
    ops = NormOperators(mesh)
    if cfg.decay_mode():
        ref = np.zeros_like(u)
    else:
        ref = reconstruct_expansion(ctx.u0, ctx.macro_mesh, ctx.cell, eps, mesh, order=0)
    l2, h1, surf = error_norms(u, ref, ops=ops)
    nu = error_norms(u, np.zeros_like(u), ops=ops)
    diag = {
        "eps": eps,
        "n_vertices": mesh.n_vertices,
        "iterations": trace.iterations,
        "eta": sc.eta,
        "max_ratio": trace.max_ratio(),
        "residual": trace.residual,
        "trace_C": trace_constant(nu[0], nu[2], nu[1], eps),
        "energy": nu[1] ** 2 + (sc.eps_alpha + sc.eps_beta) * (nu[0] ** 2 + nu[2] ** 2),
    }
    return ConvergenceRow(eps, l2, h1, surf, rms_nodal(u - ref)), diag


def run_sweep(cfg: RunConfig, out=None, write=True):
    """Run the eps-sweep; returns ``(record, diagnostics)``.

    Rows are flushed to CSV as they complete, so a failure leaves the
    partial table behind.
    """
    out = Path(cfg.out if out is None else out)
    if write:
        out.mkdir(parents=True, exist_ok=True)
    ctx = Context.build(cfg, need_macro=not cfg.decay_mode())
    record = ConvergenceRecord(prediction=cfg.prediction(), fit_column=cfg.fit_column())
    diags = []
    tasks = [(cfg, e, ctx) for e in cfg.eps]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(cfg.jobs) as ex:
            results = ex.map(_sweep_row, tasks)
            _collect(results, record, diags, out, write)
    else:
        _collect(map(_sweep_row, tasks), record, diags, out, write)
    record.fit()
    if write:
        record.write_csv(out / "convergence.csv")
        _write_diagnostics(diags, out / "diagnostics.csv")
        _write_plot(record, out)
    return record, diags


def _collect(results, record, diags, out, write):
    try:
        for row, diag in results:
            record.add(row)
            diags.append(diag)
            log.info("eps=%s err_l2=%s err_h1=%s err_surf=%s iterations=%d", *map(_fmt, (row.eps, row.err_l2, row.err_h1, row.err_surf)),
                     diag["iterations"])
            if write:
                record.write_csv(out / "convergence.csv")
    except Exception:
        if write:
            record.write_csv(out / "convergence.csv")
        raise


def _write_diagnostics(diags, path):
    if not diags:
        return
    keys = list(diags[0])
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(keys)
        for d in diags:
            wr.writerow([_fmt(d[k]) if isinstance(d[k], float) else d[k] for k in keys])


def _write_plot(record, out):
    col = record.fit_column
    with open(out / "convergence.dat", "w") as fh:
        fh.write(f"# eps {col}\n")
        for r in record.rows:
            fh.write(f"{_fmt(r.eps)} {_fmt(getattr(r, col))}\n")
    p = record.prediction.dominant
    (out / "convergence.gp").write_text(
        "set logscale xy\n"
        "set xlabel 'eps'\n"
        f"set ylabel '{col}'\n"
        f"fit_c = {_fmt(math.exp(record.intercept))}\n"
        f"plot 'convergence.dat' using 1:2 with linespoints title 'observed (slope {_fmt(record.slope)})', \\\n"
        f"     fit_c*x**{_fmt(p)} with lines title 'predicted exponent {_fmt(p)}'\n"
    )


def slope_line(record: ConvergenceRecord, factor=0.8):
    status = "PASS" if record.passed(factor) else "FAIL"
    p = record.prediction
    return (
        f"{status}: fitted slope {record.slope:.4f} on {record.fit_column} vs predicted exponent "
        f"{p.dominant:.4f} ({p.regime}; threshold {factor} x predicted)"
    )


def cmd_sweep(cfg: RunConfig):
    record, _ = run_sweep(cfg)
    line = slope_line(record)
    print(line)
    return EXIT_PASS if record.passed() else EXIT_FAIL


def run_compare(cfg: RunConfig, eps):
    """Micro solution, homogenized solution, reconstruction and difference on the micro mesh."""
    ctx = Context.build(cfg)
    mesh = tile_cell_mesh(ctx.cell_mesh, eps)
    mesh, u, _, _ = solve_one(cfg, eps, mesh)
    loc = TriangleLocator(ctx.macro_mesh)
    u0 = reconstruct_expansion(ctx.u0, ctx.macro_mesh, ctx.cell, eps, mesh, order=0, macro_locator=loc)
    rec = reconstruct_expansion(ctx.u0, ctx.macro_mesh, ctx.cell, eps, mesh, order=cfg.order, macro_locator=loc)
    return mesh, {"u_eps": u, "u0": u0, "reconstruction": rec, "difference": u - rec}


def cmd_compare(cfg: RunConfig):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    eps = cfg.eps[0]
    mesh, fields_ = run_compare(cfg, eps)
    for name, vals in fields_.items():
        write_field_csv(mesh, vals, out / f"{name}.csv", name)
    log.info("compare at eps=%s: max|u_eps|=%s, max|difference|=%s", _fmt(eps), _fmt(np.abs(fields_["u_eps"]).max()),
             _fmt(np.abs(fields_["difference"]).max()))
    return fields_


def cmd_micro(cfg: RunConfig):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    eps = cfg.eps[0]
    mesh, u, trace, sc = solve_one(cfg, eps)
    write_field_csv(mesh, u, out / "u_eps.csv", "u_eps")
    with open(out / "trace.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["k", "l2_volume", "l2_surface", "h1_semi", "w_norm", "ratio"])
        for k in range(trace.iterations):
            ratio = trace.ratios[k - 1] if k >= 1 else float("nan")
            wr.writerow([k + 1] + [_fmt(v) for v in (trace.l2_volume[k], trace.l2_surface[k], trace.h1_semi[k],
                                                        trace.w_norm[k], ratio)])
    log.info("eps=%s: %d iterations, eta=%s, max ratio %s", _fmt(eps), trace.iterations, _fmt(sc.eta),
             _fmt(trace.max_ratio()))
    return u, trace


def cmd_macro(cfg: RunConfig):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    ctx = Context.build(replace(cfg, micro_cell_h=cfg.cell_h))
    write_field_csv(ctx.macro_mesh, ctx.u0, out / "u0.csv", "u0")
    write_tensor_csv(ctx.cell.A_eff, out / "tensor.csv")
    return ctx.u0


COMMANDS = {"cell": cmd_cell, "micro": cmd_micro, "macro": cmd_macro, "sweep": cmd_sweep, "compare": cmd_compare}


def build_parser():
    ap = argparse.ArgumentParser(prog="perfhom", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="INI configuration file (defaults to the reference setup)")
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--eps", help="comma-separated eps list, e.g. 0.25,0.125")
    ap.add_argument("--alpha", type=float)
    ap.add_argument("--beta", type=float)
    ap.add_argument("--seed", type=int)
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def config_from_args(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    over = {}
    if args.out:
        over["out"] = args.out
    if args.eps:
        over["eps"] = _float_list(args.eps)
    for k in ("alpha", "beta", "seed"):
        if getattr(args, k) is not None:
            over[k] = getattr(args, k)
    return replace(cfg, **over).validate()


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = config_from_args(args)
        np.random.seed(cfg.seed)
        result = COMMANDS[args.command](cfg)
    except (ConfigError, ConvergenceError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return result if isinstance(result, int) else EXIT_PASS


if __name__ == "__main__":
    sys.exit(main())
