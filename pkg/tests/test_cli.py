"""Scenario-file front end: parsing diagnostics, schemas, goldens, sweeps.

CLI behavior is pinned at the observable surface: exit codes, stderr
diagnostics with config locations, CSV bytes (golden determinism and the
manifest round trip), and the long-format sweep layout. Numeric content
is cross-checked against the library routes the commands wrap.
"""

import math
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from gfmlab.cli import main, parse_sweep, resolve_sweep_key, run
from gfmlab.converter import InnerLoopParams, derive_equivalent_impedance
from gfmlab.errors import ConfigError

W1 = 100.0 * math.pi

CASE1 = """\
[circuit]
Lf = 0.1
Lg = 0.05

[outer]
Kpsc = 0.1
omega_p = 18.84955592153876
Kiv = 50.0
Pref = 1.0

[inner]
frame = "rotating"
Lv = 0.1
Rv = 0.1
kpi = 2.0
Fv = 1.0
Td = 150e-6
delay_mode = "pade"
"""

SIM_EXTRA = """\
[analysis]
duration = 0.1
theta_kick = 0.01
frequencies = [6.0]
"""


@pytest.fixture
def case1(tmp_path):
    path = tmp_path / "case1.toml"
    path.write_text(CASE1)
    return path


@pytest.fixture
def simcase(tmp_path):
    path = tmp_path / "bench.toml"
    path.write_text(CASE1.replace('frame = "rotating"', 'frame = "stationary"')
                    .replace("Lv = 0.1", "Lv = 0.3") + SIM_EXTRA)
    return path


def read_rows(path):
    lines = Path(path).read_text().splitlines()
    return lines[0].split(","), [ln.split(",") for ln in lines[1:]]


class TestConfigDiagnostics:
    def test_missing_config_exits_2_with_no_outputs(self, tmp_path, capsys):
        out = tmp_path / "out"
        code = main(["verdict", str(tmp_path / "nope.toml"), "--out", str(out)])
        assert code == 2
        assert "cannot read config" in capsys.readouterr().err
        assert not out.exists()

    def test_unknown_key_names_its_section(self, tmp_path, capsys):
        cfg = tmp_path / "bad.toml"
        cfg.write_text("[inner]\nLq = 3.0\n")
        assert main(["verdict", str(cfg)]) == 2
        err = capsys.readouterr().err
        assert "unknown key 'Lq' in [inner]" in err
        assert "bad.toml" in err

    def test_unknown_section_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "bad.toml"
        cfg.write_text("[grid]\nLg = 0.05\n")
        assert main(["verdict", str(cfg)]) == 2
        assert "unknown section [grid]" in capsys.readouterr().err

    def test_toml_syntax_error_exits_2(self, tmp_path, capsys):
        cfg = tmp_path / "bad.toml"
        cfg.write_text("[inner\nLv = 0.1\n")
        assert main(["verdict", str(cfg)]) == 2

    def test_invalid_parameter_value_carries_location(self, tmp_path, capsys):
        cfg = tmp_path / "bad.toml"
        cfg.write_text('[inner]\nframe = "polar"\n')
        assert main(["impedance", str(cfg)]) == 2
        assert "[inner]" in capsys.readouterr().err

    def test_scan_needs_frequencies(self, case1, capsys):
        assert main(["scan-z", str(case1)]) == 2
        assert "frequencies is required" in capsys.readouterr().err


class TestVerdictCommand:
    def test_case1_large_rv_is_unstable_sso(self, case1, tmp_path):
        out = tmp_path / "out"
        assert main(["verdict", str(case1), "--out", str(out)]) == 0
        header, rows = read_rows(out / "verdict.csv")
        assert header == ["case", "stable", "mode", "f_star_hz", "net_damping"]
        case, stable, mode, f_star, net = rows[0]
        assert case == "case1"
        assert stable == "false"
        assert mode == "SSO"
        assert float(f_star) == pytest.approx(8.8384, rel=1e-3)
        assert float(net) == pytest.approx(-0.025271, rel=1e-3)

    def test_rv_sweep_flips_the_verdict(self, case1, tmp_path):
        out = tmp_path / "out"
        assert main(["verdict", str(case1), "--out", str(out),
                     "--sweep", "Rv=0.05,0.10"]) == 0
        header, rows = read_rows(out / "verdict.csv")
        assert header[-1] == "sweep"
        assert [r[1] for r in rows] == ["true", "false"]
        assert [float(r[-1]) for r in rows] == [0.05, 0.10]


class TestImpedanceCommand:
    def test_matches_the_analytic_equivalent(self, case1, tmp_path):
        out = tmp_path / "out"
        assert main(["impedance", str(case1), "--out", str(out)]) == 0
        header, rows = read_rows(out / "impedance.csv")
        assert header == ["f_hz", "re_pu", "im_pu"]
        cfg = InnerLoopParams(frame="rotating", Lv=0.1, Rv=0.1, kpi=2.0,
                              Fv=1.0, Td=150e-6, delay_mode="pade").build(W1)
        zeq, _ = derive_equivalent_impedance(cfg, 0.1)
        f, re, im = (float(v) for v in rows[37])
        za = complex(zeq(2j * math.pi * f))
        assert re + 1j * im == pytest.approx(za, rel=1e-12)

    def test_repeated_runs_are_byte_identical(self, case1, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["impedance", str(case1), "--out", str(a)]) == 0
        assert main(["impedance", str(case1), "--out", str(b)]) == 0
        assert (a / "impedance.csv").read_bytes() == (
            b / "impedance.csv").read_bytes()

    def test_kpi_sweep_orders_low_frequency_resistance(self, case1, tmp_path):
        out = tmp_path / "out"
        assert main(["impedance", str(case1), "--out", str(out),
                     "--sweep", "kpi=0.5,1,2,3"]) == 0
        header, rows = read_rows(out / "impedance.csv")
        assert header == ["f_hz", "re_pu", "im_pu", "sweep"]
        f0 = rows[0][0]
        low = [float(r[1]) for r in rows if r[0] == f0]
        assert len(low) == 4
        assert all(a <= b + 1e-12 for a, b in zip(low, low[1:]))
        # ordered by sweep value, then frequency within each block
        sweeps = [float(r[3]) for r in rows]
        n = len(rows) // 4
        assert sweeps == sorted(sweeps)
        assert [float(r[0]) for r in rows[:n]] == sorted(
            float(r[0]) for r in rows[:n])

    def test_single_value_sweep_is_the_plain_run_plus_column(
            self, case1, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["impedance", str(case1), "--out", str(a)]) == 0
        assert main(["impedance", str(case1), "--out", str(b),
                     "--sweep", "inner.Rv=0.1"]) == 0
        _, plain = read_rows(a / "impedance.csv")
        header, swept = read_rows(b / "impedance.csv")
        assert header[-1] == "sweep"
        assert [r[:3] for r in swept] == plain

    def test_jobs_do_not_change_the_bytes(self, case1, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out, jobs in ((a, "1"), (b, "3")):
            assert main(["impedance", str(case1), "--out", str(out),
                         "--sweep", "kpi=0.5,1,2,3", "--jobs", jobs]) == 0
        assert (a / "impedance.csv").read_bytes() == (
            b / "impedance.csv").read_bytes()


class TestSweepSpecs:
    def test_spec_shape_required(self):
        with pytest.raises(ConfigError, match="key=v1,v2"):
            parse_sweep("Rv")
        assert parse_sweep("Rv=0.05, 0.10") == ("Rv", ["0.05", "0.10"])

    def test_dotted_and_bare_keys_resolve(self):
        assert resolve_sweep_key("inner.Rv") == ("inner", "Rv")
        assert resolve_sweep_key("Kpsc") == ("outer", "Kpsc")
        assert resolve_sweep_key("Lg") == ("circuit", "Lg")

    def test_invalid_path_rejected(self, case1, capsys):
        assert main(["impedance", str(case1), "--sweep", "inner.Lf=1"]) == 2
        assert "invalid parameter path" in capsys.readouterr().err
        assert main(["impedance", str(case1), "--sweep", "bogus=1"]) == 2

    def test_value_must_parse_to_the_field_type(self, case1, capsys):
        assert main(["impedance", str(case1), "--sweep", "Rv=tiny"]) == 2
        assert "not a valid inner.Rv" in capsys.readouterr().err


class TestPolesCommand:
    def test_schema_and_worst_pole(self, case1, tmp_path):
        out = tmp_path / "out"
        assert main(["poles", str(case1), "--out", str(out)]) == 0
        header, rows = read_rows(out / "poles.csv")
        assert header == ["realization", "re", "im", "zeta"]
        assert all(r[0] == "rotating" for r in rows)
        # rows arrive sorted by decreasing real part
        worst = rows[0]
        assert float(worst[1]) == pytest.approx(4.8333, rel=1e-3)
        assert float(worst[2]) / (2 * math.pi) == pytest.approx(9.3716, rel=1e-3)
        assert float(worst[3]) < 0.0


class TestStepCommand:
    def test_stable_case_settles_to_the_step(self, case1, tmp_path):
        out = tmp_path / "out"
        stable = case1.parent / "stable.toml"
        stable.write_text(CASE1.replace("Rv = 0.1", "Rv = 0.05"))
        assert main(["step", str(stable), "--out", str(out)]) == 0
        header, rows = read_rows(out / "step.csv")
        assert header == ["t_s", "dP_pu"]
        assert float(rows[-1][1]) == pytest.approx(0.1, rel=0.02)

    def test_unstable_case_exits_3_without_outputs(self, case1, tmp_path):
        out = tmp_path / "out"
        assert main(["step", str(case1), "--out", str(out)]) == 3
        assert not (out / "step.csv").exists()


class TestSimulateCommand:
    def test_trace_schema_and_length(self, simcase, tmp_path):
        out = tmp_path / "out"
        assert main(["simulate", str(simcase), "--out", str(out)]) == 0
        header, rows = read_rows(out / "simulate.csv")
        assert header == ["t", "i_alpha", "i_beta", "v_alpha", "v_beta",
                          "P", "Q", "theta", "E"]
        assert len(rows) == round(0.1 / 5e-5) + 1
        assert float(rows[0][0]) == 0.0

    def test_scan_z_matches_the_analytic_point(self, simcase, tmp_path):
        out = tmp_path / "out"
        assert main(["scan-z", str(simcase), "--out", str(out)]) == 0
        header, rows = read_rows(out / "scan_z.csv")
        assert header == ["f_hz", "re_pu", "im_pu"]
        cfg = InnerLoopParams(frame="stationary", Lv=0.3, Rv=0.1, kpi=2.0,
                              Fv=1.0, Td=150e-6, delay_mode="pade").build(W1)
        zeq, _ = derive_equivalent_impedance(cfg, 0.1)
        za = complex(zeq(2j * math.pi * 6.0))
        z = float(rows[0][1]) + 1j * float(rows[0][2])
        assert abs(z - za) / abs(za) < 1e-4


class TestManifest:
    def test_round_trip_reproduces_the_outputs(self, case1, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["verdict", str(case1), "--out", str(a)]) == 0
        manifest = a / "manifest.toml"
        assert manifest.exists()
        assert "gfmlab" in manifest.read_text().splitlines()[0]
        assert main(["verdict", str(manifest), "--out", str(b)]) == 0
        assert (a / "verdict.csv").read_bytes() == (
            b / "verdict.csv").read_bytes()

    def test_records_resolved_defaults(self, case1, tmp_path):
        out = tmp_path / "out"
        assert main(["impedance", str(case1), "--out", str(out)]) == 0
        text = (out / "manifest.toml").read_text()
        for line in ("Vg_mag = 1.0", "delay_order = 2", "f_min = 1.0",
                     'case = "case1"'):
            assert line in text


class TestSvg:
    def test_plot_is_valid_xml_with_data(self, case1, tmp_path):
        import xml.dom.minidom

        out = tmp_path / "out"
        assert main(["impedance", str(case1), "--out", str(out), "--svg"]) == 0
        svg = out / "impedance.svg"
        doc = xml.dom.minidom.parse(str(svg))
        assert doc.documentElement.tagName == "svg"
        assert len(doc.getElementsByTagName("polyline")) == 2

    def test_sweeps_plot_one_curve_per_value(self, case1, tmp_path):
        import xml.dom.minidom

        out = tmp_path / "out"
        assert main(["impedance", str(case1), "--out", str(out), "--svg",
                     "--sweep", "kpi=0.5,1,2,3"]) == 0
        doc = xml.dom.minidom.parse(str(out / "impedance.svg"))
        assert len(doc.getElementsByTagName("polyline")) == 4


class TestEntryPoint:
    def test_module_invocation(self, case1, tmp_path):
        out = tmp_path / "out"
        proc = subprocess.run(
            [sys.executable, "-m", "gfmlab.cli", "verdict", str(case1),
             "--out", str(out)],
            capture_output=True, text=True)
        assert proc.returncode == 0
        assert (out / "verdict.csv").exists()

    def test_unknown_command_is_a_usage_error(self, case1):
        proc = subprocess.run(
            [sys.executable, "-m", "gfmlab.cli", "explode", str(case1)],
            capture_output=True, text=True)
        assert proc.returncode == 2
