"""Time-domain model, frequency-scan measurement, envelope classification.

The simulator exists to witness the analytic machinery, so almost every
check here is dual-route: the scanned impedance against the closed-form
equivalent, the scanned torque response against both power-angle
linearizations, the kick-response envelope against a frozen closed-loop
eigenvalue, and the classifier against synthetic exponentials whose decay
is known by construction. Frozen case numbers come from verified runs.
"""

import dataclasses
import math

import numpy as np
import pytest

from gfmlab.closedloop import assemble_model, closed_loop_poles, subsynchronous_mode
from gfmlab.converter import (
    CircuitParams,
    InnerLoopParams,
    OuterLoopParams,
    derive_equivalent_impedance,
    solve_operating_point,
)
from gfmlab.errors import ConfigError, SimulationBlowup
from gfmlab.sim import (
    Injection,
    SimScenario,
    Trace,
    classify_stability,
    scan_impedance,
    scan_torque,
    simulate,
)
from gfmlab.torque import (
    embed_dq,
    grid_impedance_dq,
    linearized_power_angle,
    power_angle_with_avc,
)

W1 = 100.0 * math.pi


def bench(frame="stationary", Lv=0.3, Rv=0.1, Lg=0.05, kpi=2.0, Fv=1.0,
          Kpsc=0.1, wp=2.0 * math.pi * 3.0, Kiv=50.0, Pref=1.0, Td=150e-6):
    """Full-feature operating case; Td=0 drops the delay stage entirely."""
    circ = CircuitParams(Lf=0.1, Lg=Lg)
    outer = OuterLoopParams(Kpsc=Kpsc, omega_p=wp, Kiv=Kiv, Pref=Pref, Vref=1.0)
    cfg = InnerLoopParams(
        frame=frame,
        Lv=Lv,
        Rv=Rv,
        kpi=kpi,
        kri=0.4,
        Fv=Fv,
        Td=Td,
        delay_mode="pade" if Td else "neglect",
        delay_order=2,
    ).build(W1)
    return circ, outer, cfg


def so_case(Rv, Fv, kpi):
    """Fast-synchronization base where the fundamental-frequency mode flips."""
    return bench(Rv=Rv, Lv=0.1, kpi=kpi, Fv=Fv, Kpsc=0.17,
                 wp=2.0 * math.pi * 300.0, Pref=0.1)


class TestScenarioValidation:
    def test_time_step_cap(self):
        circ, outer, cfg = bench()
        with pytest.raises(ConfigError, match="at most 1e-4"):
            SimScenario(circ, outer, cfg, time_step=2e-4)

    def test_duration_must_be_whole_steps(self):
        circ, outer, cfg = bench()
        with pytest.raises(ConfigError, match="whole number of time steps"):
            SimScenario(circ, outer, cfg, duration=0.100003)

    def test_unknown_event_parameter(self):
        circ, outer, cfg = bench()
        with pytest.raises(ConfigError, match="unknown event parameter"):
            SimScenario(circ, outer, cfg, events=((0.1, "inner.Lf", 0.2),))

    def test_events_must_be_ordered(self):
        circ, outer, cfg = bench()
        with pytest.raises(ConfigError, match="time-ordered"):
            SimScenario(circ, outer, cfg,
                        events=((0.2, "inner.Rv", 0.15), (0.1, "inner.Lv", 0.2)))

    def test_inner_event_needs_parameter_source(self):
        circ, outer, cfg = bench()
        bare = dataclasses.replace(cfg, source=None)
        with pytest.raises(ConfigError, match="InnerLoopParams"):
            SimScenario(circ, outer, bare, events=((0.1, "inner.Rv", 0.15),))

    def test_injection_bounds(self):
        with pytest.raises(ConfigError, match="unknown injection target"):
            Injection("current", 10.0, 0.01)
        with pytest.raises(ConfigError, match="frequency must be positive"):
            Injection("grid_voltage", 0.0, 0.01)
        with pytest.raises(ConfigError, match=r"\(0, 0.05\]"):
            Injection("grid_voltage", 10.0, 0.2)

    def test_angle_injection_requires_frozen_psc(self):
        circ, outer, cfg = bench()
        inj = Injection("angle", 10.0, 0.005)
        with pytest.raises(ConfigError, match="freeze_psc"):
            SimScenario(circ, outer, cfg, injection=inj)
        SimScenario(circ, outer, cfg, injection=inj, freeze_psc=True)

    def test_unknown_start_mode(self):
        circ, outer, cfg = bench()
        with pytest.raises(ConfigError, match="unknown start mode"):
            SimScenario(circ, outer, cfg, start="cold")

    def test_delay_must_be_whole_samples(self):
        # 150 us against a 100 us step is 1.5 samples
        circ, outer, cfg = bench()
        sc = SimScenario(circ, outer, cfg, time_step=1e-4, duration=0.1)
        with pytest.raises(ConfigError, match="whole samples"):
            simulate(sc)

    def test_fundamental_mismatch_rejected(self):
        circ = CircuitParams(Lf=0.1, Lg=0.05, omega1=2.0 * math.pi * 60.0)
        _, outer, cfg = bench()
        with pytest.raises(ConfigError, match="disagree on the fundamental"):
            simulate(SimScenario(circ, outer, cfg, duration=0.05))


class TestEquilibriumStart:
    """A correct operating point is a fixed orbit of the nonlinear model."""

    @pytest.mark.parametrize("frame", ["stationary", "rotating"])
    def test_equilibrium_holds_for_one_second(self, frame):
        circ, outer, cfg = bench(frame=frame)
        tr = simulate(SimScenario(circ, outer, cfg, duration=1.0))
        assert abs(tr.P - outer.Pref).max() < 1e-6
        assert abs(np.abs(tr.v) - 1.0).max() < 1e-6
        assert abs(tr.E - tr.E[0]).max() < 1e-6
        # the angle advances at exactly the fundamental rate
        assert abs(tr.theta - tr.theta[0] - W1 * tr.t).max() < 1e-6

    def test_power_matches_voltage_current_product(self):
        circ, outer, cfg = bench()
        tr = simulate(SimScenario(circ, outer, cfg, duration=0.1))
        assert abs(tr.P - (tr.v * np.conj(tr.i)).real).max() < 1e-12
        assert abs(tr.Q - (tr.v * np.conj(tr.i)).imag).max() < 1e-12


class TestTraceContainer:
    def build_trace(self):
        circ, outer, cfg = bench()
        return simulate(SimScenario(circ, outer, cfg, duration=0.05))

    def test_shapes_and_projections(self):
        tr = self.build_trace()
        n = len(tr.t)
        assert n == round(0.05 / 5e-5) + 1
        for arr in (tr.i, tr.v, tr.P, tr.Q, tr.theta, tr.E):
            assert len(arr) == n
        assert np.array_equal(tr.i_alpha, tr.i.real)
        assert np.array_equal(tr.v_beta, tr.v.imag)

    def test_window_selects_halfopen_span(self):
        tr = self.build_trace()
        seg = tr.window(0.01, 0.03)
        assert seg.t[0] >= 0.01 - 1e-12
        assert seg.t[-1] <= 0.03 + 1e-12
        assert len(seg.t) == round(0.02 / 5e-5) + 1

    def test_csv_round_trip(self, tmp_path):
        tr = self.build_trace()
        path = tmp_path / "trace.csv"
        tr.to_csv(path)
        header = path.read_text().splitlines()[0]
        for name in ("t", "i_alpha", "i_beta", "v_alpha", "v_beta",
                     "P", "Q", "theta", "E"):
            assert name in header
        data = np.loadtxt(path, delimiter=",", skiprows=1)
        assert data.shape == (len(tr.t), 9)
        assert np.allclose(data[:, 0], tr.t, rtol=0, atol=0)
        assert np.allclose(data[:, 1] + 1j * data[:, 2], tr.i, rtol=1e-15)
        assert np.allclose(data[:, 5], tr.P, rtol=1e-15)


class TestRampStart:
    def test_ramp_reaches_the_operating_point(self):
        circ, outer, cfg = bench()
        tr = simulate(SimScenario(circ, outer, cfg, duration=1.5, start="ramp"))
        assert tr.P[0] == 0.0
        tail = tr.window(1.3)
        assert tail.P.mean() == pytest.approx(1.0, abs=5e-3)
        assert abs(tr.v[-1]) == pytest.approx(1.0, abs=1e-3)
        assert classify_stability(tr, window_start=0.9).label == "stable"


class TestClassifier:
    def synthetic(self, envelope):
        t = np.arange(0.0, 3.0 + 5e-4, 1e-3)
        zc = np.zeros_like(t, dtype=complex)
        z = np.zeros_like(t)
        return Trace(t, zc, zc, envelope(t), z, z, z)

    def test_decaying_tone(self):
        tr = self.synthetic(
            lambda t: 0.5 + 1e-3 * np.exp(-3.0 * t) * np.sin(2 * np.pi * 20 * t))
        v = classify_stability(tr)
        assert v.label == "stable"
        assert v.frequency_hz == 20.0
        assert v.growth_rate == pytest.approx(-3.0, abs=0.3)

    def test_growing_tone(self):
        tr = self.synthetic(
            lambda t: 0.5 + 1e-6 * np.exp(2.0 * t) * np.sin(2 * np.pi * 35 * t))
        v = classify_stability(tr)
        assert v.label == "unstable"
        assert v.frequency_hz == 35.0
        assert v.growth_rate == pytest.approx(2.0, abs=0.2)

    def test_near_constant_envelope_is_marginal(self):
        tr = self.synthetic(
            lambda t: 0.5 + 1e-4 * np.exp(0.1 * t) * np.sin(2 * np.pi * 12 * t))
        v = classify_stability(tr)
        assert v.label == "marginal"
        assert v.frequency_hz == 12.0
        assert v.growth_rate == pytest.approx(0.1, abs=0.05)

    def test_flat_trace_is_marginal(self):
        tr = self.synthetic(lambda t: np.full_like(t, 0.5))
        v = classify_stability(tr)
        assert v.label == "marginal"
        assert v.growth_rate == pytest.approx(0.0, abs=1e-9)

    def test_short_window_rejected(self):
        tr = self.synthetic(lambda t: 0.5 + 1e-3 * np.sin(2 * np.pi * 20 * t))
        with pytest.raises(ConfigError, match="20 fundamental periods"):
            classify_stability(tr, window_start=2.7)


class TestScanGrid:
    def make_scenario(self):
        circ, outer, cfg = bench()
        return SimScenario(circ, outer, cfg, duration=1.0)

    def test_non_integer_cycle_count_rejected(self):
        with pytest.raises(ConfigError, match="does not fit the 1.0 s window"):
            scan_impedance(self.make_scenario(), [2.5])

    def test_fundamental_bin_collision_rejected(self):
        with pytest.raises(ConfigError, match="avoid the fundamental"):
            scan_impedance(self.make_scenario(), [50.0])

    def test_fractional_fundamental_window_rejected(self):
        with pytest.raises(ConfigError, match="whole fundamental periods"):
            scan_impedance(self.make_scenario(), [10.0], window=0.35)

    def test_probe_amplitude_caps(self):
        sc = self.make_scenario()
        with pytest.raises(ConfigError, match=r"\(0, 0.02\] pu"):
            scan_impedance(sc, [10.0], amplitude=0.05)
        with pytest.raises(ConfigError, match=r"\(0, 0.01\] rad"):
            scan_torque(sc, [10.0], amplitude=0.02)

    def test_unknown_avc_mode(self):
        with pytest.raises(ConfigError, match="unknown AVC mode"):
            scan_torque(self.make_scenario(), [10.0], avc="open")


class TestBareFilterScan:
    def test_bypassed_loops_leave_the_physical_reactance(self):
        # with the controller bypassed the measured impedance must be the
        # filter reactance alone, a closed-form every route agrees on
        circ, outer, cfg = bench(Fv=0.0, Td=0.0)
        sc = SimScenario(circ, outer, cfg, time_step=1e-4, duration=1.0,
                         bypass_inner=True)
        res = scan_impedance(sc, [2.0, 6.0, 15.0, 42.0, 117.0], amplitude=0.01)
        for f, z, q in zip(res.frequencies, res.values, res.quality):
            target = 1j * 2.0 * math.pi * f * circ.Lf / W1
            assert abs(z - target) / abs(target) < 1e-6
            assert q < 1e-6


class TestImpedanceScan:
    def test_scan_matches_analytic_equivalent(self):
        circ, outer, cfg = bench()
        zeq, _ = derive_equivalent_impedance(cfg, circ.Lf)
        sc = SimScenario(circ, outer, cfg, duration=1.0)
        res = scan_impedance(sc, [6.0, 42.0, 117.0], amplitude=0.01)
        for f, z, q in zip(res.frequencies, res.values, res.quality):
            za = complex(zeq(2j * math.pi * f))
            assert abs(abs(z) / abs(za) - 1.0) < 1e-4
            assert abs(np.angle(z / za)) < math.radians(0.01)
            assert q < 1e-5

    def test_voltage_feedforward_raises_low_frequency_resistance(self):
        values = {}
        for fv in (0.0, 1.0):
            circ, outer, cfg = bench(Fv=fv)
            sc = SimScenario(circ, outer, cfg, duration=1.0)
            values[fv] = scan_impedance(sc, [2.0, 5.0], amplitude=0.01).values
        assert values[1.0][0].real > values[0.0][0].real
        assert values[1.0][1].real > values[0.0][1].real
        assert values[0.0][0].real == pytest.approx(0.09495, abs=2e-4)
        assert values[1.0][0].real == pytest.approx(0.09967, abs=2e-4)


class TestTorqueScan:
    def route_pair(self):
        circ, outer, cfg = bench(Lv=0.1, Rv=0.1)
        zeq, _ = derive_equivalent_impedance(cfg, circ.Lf)
        zdq = embed_dq(zeq, W1)
        zg = grid_impedance_dq(circ.Lg, W1)
        op = solve_operating_point(circ, outer, zeq, geq=None, frame="stationary")
        return circ, outer, cfg, op, zdq, zg

    def test_frozen_avc_scan_matches_power_angle_linearization(self):
        circ, outer, cfg, op, zdq, zg = self.route_pair()
        gpt = linearized_power_angle(op, zdq, zg)
        sc = SimScenario(circ, outer, cfg, duration=1.0)
        res = scan_torque(sc, [5.0, 14.0, 33.0], amplitude=0.005, avc="frozen")
        for f, g, q in zip(res.frequencies, res.values, res.quality):
            ga = complex(gpt(2j * math.pi * f))
            assert abs(g - ga) / abs(ga) < 0.01
            assert q < 0.01

    def test_active_avc_scan_matches_closed_voltage_loop_route(self):
        circ, outer, cfg, op, zdq, zg = self.route_pair()
        freqs = [5.0, 14.0, 33.0]
        tbl = power_angle_with_avc(op, zdq, zg, outer.Kiv,
                                   grid=2.0 * math.pi * np.asarray(freqs))
        sc = SimScenario(circ, outer, cfg, duration=1.0)
        res = scan_torque(sc, freqs, amplitude=0.005, avc="active")
        for g, ga in zip(res.values, tbl.values):
            assert abs(g - ga) / abs(ga) < 0.01


class TestNumericalBehavior:
    def test_runs_are_deterministic(self):
        circ, outer, cfg = bench(frame="rotating")
        sc = SimScenario(circ, outer, cfg, duration=0.3, theta_kick=0.01)
        a, b = simulate(sc), simulate(sc)
        assert np.array_equal(a.i, b.i)
        assert np.array_equal(a.P, b.P)
        assert np.array_equal(a.E, b.E)

    def test_halving_the_step_barely_moves_a_scan_point(self):
        circ, outer, cfg = bench()
        values = {}
        for h in (5e-5, 2.5e-5):
            sc = SimScenario(circ, outer, cfg, time_step=h, duration=1.0)
            values[h] = scan_impedance(sc, [15.0], amplitude=0.01).values[0]
        drift = abs(values[2.5e-5] - values[5e-5]) / abs(values[5e-5])
        assert drift < 2e-3


class TestKickEnvelope:
    def test_envelope_decay_matches_the_closed_loop_pole(self):
        # frozen eigenvalue of this case: -2.753 + 2*pi*10.234j
        circ, outer, cfg = bench(frame="rotating", Lv=0.1, Rv=0.05)
        tr = simulate(SimScenario(circ, outer, cfg, duration=3.0,
                                  theta_kick=0.01))
        pole_sigma = -2.753020136651431
        for t0 in (0.3, 0.5):
            v = classify_stability(tr, window_start=t0)
            assert v.label == "stable"
            assert v.frequency_hz == 10.0
            assert abs(v.growth_rate / pole_sigma - 1.0) < 0.1
        v = classify_stability(tr, window_start=0.3)
        assert v.growth_rate == pytest.approx(-2.748, abs=0.01)


class TestParameterEvents:
    def event_scenario(self, duration=3.0):
        circ, outer, cfg = bench(Lv=0.1, Rv=0.1, Lg=0.1, Fv=0.0,
                                 Kpsc=0.17, Pref=1.0)
        return SimScenario(circ, outer, cfg, duration=duration,
                           events=((0.5, "inner.Rv", 0.15),
                                   (1.7, "inner.Lv", 0.2)))

    def test_destabilizing_then_restoring_switches(self):
        # raising the virtual resistance tips the subsynchronous pair over
        # (+1.28 Np/s at 13.1 Hz); raising the virtual inductance restores
        # decay (-5.38 Np/s); the sim must tell the same story from one run
        tr = simulate(self.event_scenario())
        pre = tr.window(0.0, 0.5)
        assert abs(pre.P - 1.0).max() < 1e-6
        mid = classify_stability(tr.window(0.55, 1.7), window_start=0.55)
        assert mid.label == "unstable"
        assert mid.frequency_hz == 13.0
        assert mid.growth_rate == pytest.approx(1.27, abs=0.15)
        post = classify_stability(tr.window(1.75, 3.0), window_start=1.75)
        assert post.label == "stable"
        assert post.frequency_hz == 10.0
        assert post.growth_rate == pytest.approx(-5.34, abs=0.3)
        assert abs(tr.P).max() == pytest.approx(1.393, abs=0.05)

    def test_states_ride_through_a_retune(self):
        # across the switch the current may only continue its fundamental
        # rotation; a state reset would show up as a jump
        tr = simulate(self.event_scenario(duration=0.6))
        k = round(0.5 / 5e-5)
        assert abs(tr.P[k + 1] - tr.P[k]) < 1e-3
        spin = np.exp(1j * W1 * 5e-5)
        assert abs(tr.i[k + 1] - tr.i[k] * spin) < 1e-3


class TestBlowup:
    def test_divergence_raises_with_partial_trace(self):
        circ, outer, cfg = so_case(0.05, 0.0, 2.0)
        sc = SimScenario(circ, outer, cfg, duration=1.5)
        with pytest.raises(SimulationBlowup) as exc:
            simulate(sc)
        tr = exc.value.trace
        assert tr is not None
        assert np.all(np.isfinite(tr.P))
        assert 0.3 < tr.t[-1] < 0.8
        v = classify_stability(tr, window_start=0.0)
        assert v.label == "unstable"


class TestSynchronousInstabilitySignature:
    """Voltage feedforward flips a mode near the fundamental on and off."""

    def run_leg(self, Fv):
        circ, outer, cfg = so_case(0.08, Fv, 2.0)
        sc = SimScenario(circ, outer, cfg, duration=1.5, theta_kick=1e-3)
        try:
            return simulate(sc)
        except SimulationBlowup as exc:
            return exc.trace

    def test_feedforward_off_diverges_near_the_fundamental(self):
        tr = self.run_leg(0.0)
        v = classify_stability(tr, window_start=0.1)
        assert v.label == "unstable"
        assert 45.0 <= v.frequency_hz <= 55.0
        # stationary-frame signature of a synchronous mode: a dc offset in
        # the current paired with a component near twice the fundamental
        seg = tr.window(tr.t[-1] - 0.3)
        ac = seg.i - seg.i.mean()
        tseg = seg.t - seg.t[0]
        bin103 = abs(np.mean(ac * np.exp(-2j * math.pi * 103.0 * tseg)))
        assert abs(seg.i.mean()) > 0.1
        assert bin103 > 0.1

    def test_feedforward_on_holds_the_orbit(self):
        tr = self.run_leg(1.0)
        v = classify_stability(tr, window_start=0.1)
        assert v.label == "stable"
        assert abs(tr.window(1.2).i.mean()) < 0.01
