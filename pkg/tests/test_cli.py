import csv

import numpy as np
import pytest

from perfhom.cell import read_tensor_csv
from perfhom.cli import (
    EXIT_ERROR,
    EXIT_FAIL,
    EXIT_PASS,
    ConfigError,
    RunConfig,
    cmd_cell,
    cmd_compare,
    cmd_macro,
    cmd_micro,
    compile_expression,
    load_config,
    main,
    parse_config,
    run_compare,
    run_sweep,
)

SMALL = """
[geometry]
eps = 1/4, 1/8, 1/16
macro_n = 32
"""


def _read_column(path, name):
    with open(path) as fh:
        return np.array([float(r[name]) for r in csv.DictReader(fh)])


class TestConfig:
    def test_empty_file_gives_defaults(self, tmp_path):
        p = tmp_path / "empty.ini"
        p.write_text("")
        cfg = load_config(p)
        assert cfg == RunConfig()
        assert cfg.hole_radius == 0.4 and cfg.f == "1" and cfg.C1 == 1 and cfg.C2 == 1

    def test_full_file(self):
        cfg = parse_config(
            "[geometry]\neps = 0.5, 0.25\nhole_radius = 0.3\n[scaling]\nalpha = -1\nbeta = 1\n"
            "[reaction]\nkind = tanh\n[source]\nf = x1 * (1 - x1)\n[output]\norder = 0\n"
        )
        assert cfg.eps == (0.5, 0.25) and cfg.alpha == -1 and cfg.reaction == "tanh" and cfg.order == 0
        assert cfg.resolved_regime() == "combined_neg"
        np.testing.assert_allclose(cfg.source()(np.array([[0.5, 0.0]])), [0.25])

    def test_non_integer_inverse_eps(self):
        with pytest.raises(ConfigError, match="geometry.eps"):
            parse_config("[geometry]\neps = 0.3\n")

    def test_unknown_key_named(self):
        with pytest.raises(ConfigError, match="geometry.radius"):
            parse_config("[geometry]\nradius = 0.3\n")

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="mesh"):
            parse_config("[mesh]\nh = 0.1\n")

    @pytest.mark.parametrize("text, key", [("[reaction]\nc1 = 0\n", "C1"), ("[reaction]\nc2 = -1\n", "C2"),
                                           ("[geometry]\neps = 0.125, 0.25\n", "geometry.eps"),
                                           ("[geometry]\nhole_radius = 0.5\n", "hole_radius"),
                                           ("[output]\norder = 2\n", "output.order"),
                                           ("[scaling]\nalpha = one\n", "scaling.alpha"),
                                           ("[coefficient]\nkind = expression\n", "coefficient.expression")])
    def test_validation_names_key(self, text, key):
        with pytest.raises(ConfigError, match=key):
            parse_config(text)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.ini")

    def test_expression_whitelist(self):
        f = compile_expression("2 + sin(2*pi*y1)", ("y1", "y2"))
        np.testing.assert_allclose(f(np.array([[0.25, 0.0]])), [3.0])
        np.testing.assert_allclose(compile_expression("3", ("x1", "x2"))(np.zeros((4, 2))), 3.0)
        with pytest.raises(ConfigError, match="__import__"):
            compile_expression("__import__('os')", ("y1",))
        with pytest.raises(ConfigError):
            compile_expression("1 +", ("y1",))

    def test_fit_column_surface_mode(self):
        cfg = RunConfig(alpha=-2, beta=0, C2=0)
        assert cfg.fit_column() == "err_surf" and cfg.prediction().dominant == pytest.approx(0.5)
        assert RunConfig().fit_column() == "err_l2"


class TestCell:
    def test_identity_no_hole(self, tmp_path):
        cfg = RunConfig(hole_radius=0.0, coefficient="identity", cell_h=1 / 8, out=str(tmp_path))
        cmd_cell(cfg)
        np.testing.assert_allclose(read_tensor_csv(tmp_path / "tensor.csv"), np.eye(2), atol=1e-10)
        assert (tmp_path / "chi.csv").exists()
        assert float((tmp_path / "porosity.csv").read_text().split()[1]) == 1.0

    def test_laminate(self, tmp_path):
        cfg = RunConfig(hole_radius=0.0, coefficient="laminate", cell_h=1 / 64, out=str(tmp_path))
        cmd_cell(cfg)
        np.testing.assert_allclose(read_tensor_csv(tmp_path / "tensor.csv"), np.diag([0.5, 3**-0.5]), atol=1e-3)

    def test_expression_coefficient(self, tmp_path):
        cfg = RunConfig(hole_radius=0.0, coefficient="expression", coefficient_expression="2 + 0*y1",
                        gamma_lower=2, gamma_upper=2, cell_h=1 / 8, out=str(tmp_path))
        np.testing.assert_allclose(cmd_cell(cfg).A_eff, 2 * np.eye(2), atol=1e-10)


class TestSweep:
    def test_case1_passes_and_is_deterministic(self, tmp_path):
        cfg = parse_config(SMALL)
        codes = []
        for d in ("a", "b"):
            codes.append(main(["sweep", "--config", str(_write(tmp_path / "c.ini", SMALL)), "--out", str(tmp_path / d)]))
        assert codes == [EXIT_PASS, EXIT_PASS]
        for name in ("convergence.csv", "diagnostics.csv", "convergence.dat", "convergence.gp"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        err = _read_column(tmp_path / "a" / "convergence.csv", "err_l2")
        assert len(err) == len(cfg.eps) and np.all(np.diff(err) < 0)
        slope = _read_column(tmp_path / "a" / "convergence.csv", "fitted_slope")[0]
        assert slope > 0.9

    def test_fail_exit_code(self, tmp_path, capsys):
        text = SMALL + "[scaling]\nregime = volume_pos\ntheta = 4\nmu = 2\n"
        code = main(["sweep", "--config", str(_write(tmp_path / "c.ini", text)), "--out", str(tmp_path / "o")])
        assert code == EXIT_FAIL
        assert capsys.readouterr().out.startswith("FAIL")

    def test_decay_mode_measures_u_itself(self, tmp_path):
        cfg = parse_config("[geometry]\neps = 1/4, 1/8, 1/16\n[scaling]\nalpha = 1\nbeta = -1\n")
        record, diags = run_sweep(cfg, write=False)
        assert record.fit_column == "err_l2" and record.prediction.regime == "combined_neg"
        assert np.all(np.diff(record.column("err_l2")) < 0)
        assert all(d["max_ratio"] <= d["eta"] + 0.05 for d in diags)

    def test_errors_exit_one(self, tmp_path):
        assert main(["sweep", "--config", str(tmp_path / "missing.ini")]) == EXIT_ERROR
        assert main(["cell", "--eps", "0.3", "--out", str(tmp_path)]) == EXIT_ERROR


class TestCompare:
    def test_zero_source(self, tmp_path):
        cfg = parse_config("[geometry]\neps = 1/4\nmacro_n = 16\n[source]\nf = 0\n")
        _, fields = run_compare(cfg, 0.25)
        assert all(not v.any() for v in fields.values())

    def test_order_zero_reconstruction(self, tmp_path):
        cfg = parse_config("[geometry]\neps = 1/4\nmacro_n = 16\n[output]\norder = 0\n")
        _, fields = run_compare(cfg, 0.25)
        np.testing.assert_array_equal(fields["reconstruction"], fields["u0"])

    def test_files(self, tmp_path):
        cfg = parse_config(f"[geometry]\neps = 1/4\nmacro_n = 32\n[output]\ndir = {tmp_path}\n")
        fields = cmd_compare(cfg)
        for name in ("u_eps", "u0", "reconstruction", "difference"):
            assert (tmp_path / f"{name}.csv").exists()
        assert np.abs(fields["difference"]).max() < np.abs(fields["u_eps"]).max()


def test_micro_and_macro_commands(tmp_path):
    cfg = parse_config(f"[geometry]\neps = 1/4\nmacro_n = 16\ncell_h = 1/16\n[output]\ndir = {tmp_path}\n")
    u, trace = cmd_micro(cfg)
    assert trace.converged and u.max() > 0
    rows = list(csv.DictReader(open(tmp_path / "trace.csv")))
    assert len(rows) == trace.iterations
    u0 = cmd_macro(cfg)
    assert (tmp_path / "u0.csv").exists() and u0.max() > 0


def _write(path, text):
    path.write_text(text)
    return path
