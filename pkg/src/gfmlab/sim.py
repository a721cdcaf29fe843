"""Averaged time-domain model and measurement-style frequency scans.

The linear analyses elsewhere in the package descend from one shared
block algebra, so they cannot vouch for each other. This module is the
independent witness: it integrates the nonlinear averaged converter in
the stationary frame with the control law wired exactly as on a bench
rig (virtual admittance, current controller, voltage feedforward,
transport delay as a sample buffer, power-synchronization integrator,
voltage-magnitude integrator), then measures impedances and damping
the way hardware would: inject a small sinusoid, wait out the
transient, project single DFT bins.

Space vectors are complex per-unit quantities, x = alpha + j*beta.
With the grid EMF at Vg*exp(j*w1*t) every stationary-frame signal is a
complex exponential at w1 in steady state and rotating-frame controller
states are constant, which is what makes exact equilibrium starts and
leakage-free windowing possible.
"""

from __future__ import annotations

import cmath
import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .converter import (
    OMEGA1_DEFAULT,
    derive_equivalent_impedance,
    solve_operating_point,
)
from .errors import ConfigError, IllPosedLoopError, NumericalError, SimulationBlowup
from .ratfun import S
from .statespace import _canonical_complex

BLOWUP_LIMIT = 100.0
RAMP_TIME = 0.2

# parameters that may be switched mid-run; anything that would change a
# controller state dimension (frame, filter kind, delay) is excluded
EVENT_FIELDS = {
    "inner": ("Lv", "Rv", "kpi", "kri", "kii", "Fv"),
    "outer": ("Kpsc", "omega_p", "Kiv", "Pref", "Vref"),
    "circuit": ("Lg",),
}

TRACE_COLUMNS = ("t", "i_alpha", "i_beta", "v_alpha", "v_beta", "P", "Q", "theta", "E")


# ---------------------------------------------------------------------------
# scenario types


@dataclass(frozen=True)
class Injection:
    """Single-frequency probe riding on top of a scenario.

    Target "grid_voltage" adds a positive-sequence stationary-frame
    exponential to the grid EMF; "angle" adds a sine to the modulation
    angle, which requires the synchronization loop to be frozen so the
    probe owns that angle.
    """

    target: str
    frequency_hz: float
    amplitude: float
    start_time: float = 0.0

    def __post_init__(self):
        if self.target not in ("grid_voltage", "angle"):
            raise ConfigError(f"unknown injection target {self.target!r}")
        if not self.frequency_hz > 0.0:
            raise ConfigError("injection frequency must be positive")
        if not 0.0 < self.amplitude <= 0.05:
            raise ConfigError("injection amplitude must lie in (0, 0.05]")
        if self.start_time < 0.0:
            raise ConfigError("injection start time cannot be negative")


@dataclass(frozen=True)
class SimScenario:
    """Everything one time-domain run needs.

    Events are (time, "section.field", value) triples applied at step
    boundaries; controller states ride through a retune the way a live
    digital controller keeps its filter memory when a gain changes.
    start="equilibrium" initialises every state on the periodic orbit of
    the solved operating point; "ramp" starts from zero and ramps the
    EMF reference over the first 0.2 s. theta_kick offsets the initial
    modulation angle, the standard small-disturbance probe.
    """

    circuit: object
    outer: object
    cfg: object
    time_step: float = 5e-5
    duration: float = 1.0
    events: tuple = ()
    injection: Injection | None = None
    start: str = "equilibrium"
    theta_kick: float = 0.0
    freeze_psc: bool = False
    freeze_avc: bool = False
    bypass_inner: bool = False

    def __post_init__(self):
        if not 0.0 < self.time_step <= 1e-4:
            raise ConfigError("time step must be positive and at most 1e-4 s")
        n = round(self.duration / self.time_step)
        if n < 1 or abs(n * self.time_step - self.duration) > 1e-9:
            raise ConfigError("duration must be a positive whole number of time steps")
        if self.start not in ("equilibrium", "ramp"):
            raise ConfigError(f"unknown start mode {self.start!r}")
        events = []
        last = -math.inf
        for ev in self.events:
            try:
                when, path, value = ev
            except (TypeError, ValueError):
                raise ConfigError(f"event {ev!r} is not a (time, path, value) triple")
            when = float(when)
            if when < 0.0:
                raise ConfigError("event times cannot be negative")
            if when < last:
                raise ConfigError("events must be time-ordered")
            last = when
            section, _, field = str(path).partition(".")
            if section not in EVENT_FIELDS or field not in EVENT_FIELDS[section]:
                raise ConfigError(f"unknown event parameter {path!r}")
            if section == "inner" and self.cfg.source is None:
                raise ConfigError(
                    "inner-loop events need a config built from InnerLoopParams"
                )
            events.append((when, section, field, float(value)))
        object.__setattr__(self, "events", tuple(events))
        if self.injection is not None:
            if self.injection.target == "angle" and not self.freeze_psc:
                raise ConfigError("angle injection requires freeze_psc")

    @property
    def n_steps(self):
        return round(self.duration / self.time_step)


@dataclass
class Trace:
    """Sampled run: stationary-frame vectors plus the slow states."""

    t: np.ndarray
    i: np.ndarray
    v: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    theta: np.ndarray
    E: np.ndarray
    omega1: float = OMEGA1_DEFAULT

    @property
    def i_alpha(self):
        return self.i.real

    @property
    def i_beta(self):
        return self.i.imag

    @property
    def v_alpha(self):
        return self.v.real

    @property
    def v_beta(self):
        return self.v.imag

    def __len__(self):
        return len(self.t)

    def window(self, t0, t1=None):
        """Sub-trace with t0 <= t (< t1); timestamps are kept absolute."""
        mask = self.t >= t0 - 1e-12
        if t1 is not None:
            mask &= self.t < t1 + 1e-12
        return Trace(
            self.t[mask],
            self.i[mask],
            self.v[mask],
            self.P[mask],
            self.Q[mask],
            self.theta[mask],
            self.E[mask],
            self.omega1,
        )

    def to_csv(self, path):
        data = np.column_stack(
            [
                self.t,
                self.i.real,
                self.i.imag,
                self.v.real,
                self.v.imag,
                self.P,
                self.Q,
                self.theta,
                self.E,
            ]
        )
        np.savetxt(
            path, data, delimiter=",", comments="", fmt="%.17g",
            header=",".join(TRACE_COLUMNS),
        )


@dataclass
class ScanResult:
    """Frequency scan: complex value and fit quality per probe point."""

    frequencies: np.ndarray
    values: np.ndarray
    quality: np.ndarray

    def __len__(self):
        return len(self.frequencies)


@dataclass(frozen=True)
class TraceVerdict:
    """Growth-rate classification of one simulated window."""

    label: str
    frequency_hz: float
    growth_rate: float


# ---------------------------------------------------------------------------
# controller runtime


def _static_gain(func, what):
    # the time-domain controller wires feedforward terms as plain gains
    if func.num_degree > 0 or func.den_degree > 0:
        raise ConfigError(f"the time-domain model supports only a static {what} gain")
    return complex(func(0.0)).real


class _Filter:
    """Complex-coefficient canonical filter with persistent state.

    Retuning swaps the coefficient matrices but keeps the state vector,
    mirroring a digital controller whose filter memory survives a gain
    change; the order must not change across a retune.
    """

    __slots__ = ("A", "B", "C", "D", "n")

    def __init__(self, func):
        self.n = None
        self.retune(func)

    def retune(self, func):
        a, b, c, d = _canonical_complex(func)
        if self.n is not None and a.shape[0] != self.n:
            raise ConfigError(
                "parameter change alters the controller order; start a new run"
            )
        self.A = a
        self.B = b[:, 0]
        self.C = c[0, :]
        self.D = complex(d[0, 0])
        self.n = a.shape[0]

    def phasor_state(self, u, omega, target=None):
        """State on the periodic orbit for input phasor u at `omega`.

        A marginal block (pure integrator) has no unique forced state;
        the output `target` then pins the free component.
        """
        if self.n == 0:
            return np.zeros(0, dtype=complex)
        m = 1j * omega * np.eye(self.n) - self.A
        if abs(np.linalg.det(m)) > 1e-9:
            return np.linalg.solve(m, self.B * u)
        if target is None:
            raise NumericalError(
                "cannot initialise a marginal controller block without a target"
            )
        rows = np.vstack([m, self.C[None, :]])
        rhs = np.concatenate([self.B * u, [target - self.D * u]])
        x, *_ = np.linalg.lstsq(rows, rhs, rcond=None)
        return x


class _Runtime:
    """Mutable parameter set plus the state layout of one run."""

    def __init__(self, sc):
        cfg = sc.cfg
        self.w1 = cfg.omega1
        if abs(sc.circuit.omega1 - self.w1) > 1e-9 * self.w1:
            raise ConfigError("circuit and controller disagree on the fundamental")
        self.rotating = cfg.frame == "rotating"
        self.frame = cfg.frame
        self.src = cfg.source
        self.fvc = float(cfg.Fvc)
        self.fv = _static_gain(cfg.Fv, "voltage feedforward")
        self.fcc = _static_gain(cfg.Fcc, "current feedback")
        self.gv = _Filter(cfg.Gv)
        self.gi = _Filter(cfg.Gi)
        self.Td = 0.0 if cfg.Gd.mode == "neglect" else float(cfg.Gd.Td)
        self.freeze_psc = sc.freeze_psc
        self.freeze_avc = sc.freeze_avc
        self.bypass = sc.bypass_inner
        self.ramp = sc.start == "ramp"
        self._set_circuit(sc.circuit)
        self._set_outer(sc.outer)
        self.inj_grid_amp = 0.0
        self.inj_angle_amp = 0.0
        self.inj_w = 0.0
        self.inj_t0 = 0.0
        if sc.injection is not None:
            self.inj_w = 2.0 * math.pi * sc.injection.frequency_hz
            self.inj_t0 = sc.injection.start_time
            if sc.injection.target == "grid_voltage":
                self.inj_grid_amp = sc.injection.amplitude
            else:
                self.inj_angle_amp = sc.injection.amplitude
        nv, ni = self.gv.n, self.gi.n
        self.sl_v = slice(1, 1 + nv)
        self.sl_i = slice(1 + nv, 1 + nv + ni)
        self.iz = 1 + nv + ni
        self.ith = self.iz + 1
        self.iE = self.ith + 1
        self.n_state = self.iE + 1

    def _set_circuit(self, circuit):
        self.circuit = circuit
        self.Lf = circuit.Lf
        self.Lt = circuit.Lf + circuit.Lg
        self.lg_ratio = circuit.Lg / self.Lt
        self.Vg = circuit.Vg_mag

    def _set_outer(self, outer):
        self.outer = outer
        self.Kpsc = outer.Kpsc
        self.wp = outer.omega_p
        self.Kiv = outer.Kiv
        self.Pref = outer.Pref
        self.Vref = outer.Vref

    def apply_event(self, section, field, value):
        if section == "inner":
            self.src = dataclasses.replace(self.src, **{field: value})
            cfg = self.src.build(self.w1)
            self.gv.retune(cfg.Gv)
            self.gi.retune(cfg.Gi)
            self.fv = _static_gain(cfg.Fv, "voltage feedforward")
            self.fvc = float(cfg.Fvc)
        elif section == "outer":
            self._set_outer(dataclasses.replace(self.outer, **{field: value}))
        else:
            self._set_circuit(dataclasses.replace(self.circuit, **{field: value}))

    # -- instantaneous signals

    def grid_emf(self, t):
        v = self.Vg * cmath.exp(1j * self.w1 * t)
        if self.inj_grid_amp and t >= self.inj_t0:
            v = v + self.inj_grid_amp * cmath.exp(1j * self.inj_w * t)
        return v

    def angle_inj(self, t):
        if self.inj_angle_amp and t >= self.inj_t0:
            return self.inj_angle_amp * math.sin(self.inj_w * t)
        return 0.0

    def _chain(self, t, y, vpcc):
        """Controller forward path at the given PCC voltage.

        Returns the two filter inputs, the current-controller output,
        the measured (frame-local) voltage, the effective modulation
        angle, and the EMF reference.
        """
        ig = y[0]
        th_eff = y[self.ith].real + self.angle_inj(t)
        e_mag = y[self.iE].real
        if self.ramp and t < RAMP_TIME:
            e_mag *= t / RAMP_TIME
        if self.rotating:
            rot = cmath.exp(-1j * th_eff)
            vm = rot * vpcc
            im = rot * ig
            eref = complex(e_mag)
        else:
            vm = vpcc
            im = ig
            eref = e_mag * cmath.exp(1j * th_eff)
        ev = eref - self.fvc * vm
        iref = self.gv.C @ y[self.sl_v] + self.gv.D * ev
        ei = iref - self.fcc * im
        ucc = self.gi.C @ y[self.sl_i] + self.gi.D * ei
        return ev, ei, ucc, vm, th_eff, eref

    def derivs(self, t, y, u_i):
        vg = self.grid_emf(t)
        delta = u_i - vg
        vpcc = vg + self.lg_ratio * delta
        ig = y[0]
        p = (vpcc * ig.conjugate()).real
        dy = np.zeros(self.n_state, dtype=complex)
        dy[0] = (self.w1 / self.Lt) * delta
        z = y[self.iz].real
        if self.freeze_psc:
            dy[self.ith] = self.w1
        else:
            dy[self.iz] = self.wp * (self.Pref - p - z)
            dy[self.ith] = self.w1 * (1.0 + self.Kpsc * z)
        if not self.freeze_avc:
            dy[self.iE] = self.Kiv * (self.Vref - abs(vpcc))
        if not self.bypass:
            ev, ei, _, _, _, _ = self._chain(t, y, vpcc)
            dy[self.sl_v] = self.gv.A @ y[self.sl_v] + self.gv.B * ev
            dy[self.sl_i] = self.gi.A @ y[self.sl_i] + self.gi.B * ei
        return dy

    def outputs(self, t, y, u_i):
        """Modulation command pushed into the delay line plus trace rows."""
        vg = self.grid_emf(t)
        vpcc = vg + self.lg_ratio * (u_i - vg)
        s = vpcc * y[0].conjugate()
        _, _, ucc, vm, th_eff, eref = self._chain(t, y, vpcc)
        if self.bypass:
            u_pre = eref if not self.rotating else cmath.exp(1j * th_eff) * eref
        elif self.rotating:
            u_pre = cmath.exp(1j * th_eff) * (ucc + self.fv * vm)
        else:
            u_pre = ucc + self.fv * vm
        return u_pre, vpcc, s.real, s.imag

    def algebraic_ui(self, t, y):
        """Delay-free converter voltage.

        With no transport delay the feedforward closes an algebraic loop
        through the PCC divider; the loop is affine in the PCC voltage,
        so one scalar solve gives the exact converter voltage.
        """
        vg = self.grid_emf(t)
        _, _, ucc, _, th_eff, eref = self._chain(t, y, 0.0)
        if self.bypass:
            return eref if not self.rotating else cmath.exp(1j * th_eff) * eref
        n0 = ucc if not self.rotating else cmath.exp(1j * th_eff) * ucc
        k = self.fv - self.gi.D * self.gv.D * self.fvc
        den = 1.0 - k * self.lg_ratio
        if abs(den) < 1e-9:
            raise IllPosedLoopError(
                "voltage feedforward closes a singular loop through the PCC divider"
            )
        return (n0 + k * (1.0 - self.lg_ratio) * vg) / den

    # -- initial conditions

    def equilibrium(self, sc):
        """State vector and modulation phasor on the periodic orbit."""
        cfg = sc.cfg
        if self.bypass:
            zeq = (self.Lf / self.w1) * (S + 1j * self.w1 if self.rotating else S)
            op = solve_operating_point(
                self.circuit, self.outer, zeq, geq=None, frame=self.frame
            )
        else:
            zeq, geq = derive_equivalent_impedance(cfg, self.circuit.Lf)
            op = solve_operating_point(
                self.circuit, self.outer, zeq, geq=geq, frame=self.frame
            )
        y = np.zeros(self.n_state, dtype=complex)
        y[0] = op.ig
        y[self.ith] = op.theta0 + sc.theta_kick
        y[self.iE] = op.E0
        if self.bypass:
            return y, op.E0 * cmath.exp(1j * op.theta0)
        if self.rotating:
            r0 = cmath.exp(-1j * op.theta0)
            vm0, im0, eref0, w_blk = r0 * op.vpcc, r0 * op.ig, complex(op.E0), 0.0
        else:
            vm0, im0 = op.vpcc, op.ig
            eref0, w_blk = op.E0 * cmath.exp(1j * op.theta0), self.w1
        ev0 = eref0 - self.fvc * vm0
        xv0 = self.gv.phasor_state(ev0, w_blk)
        iref0 = self.gv.C @ xv0 + self.gv.D * ev0
        ei0 = iref0 - self.fcc * im0
        # circuit-side output target, used only when the current block
        # carries a pure integrator and the forced state is not unique
        upre_t = op.ui * cmath.exp(1j * self.w1 * self.Td)
        ucc_t = (r0 * upre_t if self.rotating else upre_t) - self.fv * vm0
        xi0 = self.gi.phasor_state(ei0, w_blk, target=ucc_t)
        ucc0 = self.gi.C @ xi0 + self.gi.D * ei0
        y[self.sl_v] = xv0
        y[self.sl_i] = xi0
        upre0 = ucc0 + self.fv * vm0
        if self.rotating:
            upre0 = cmath.exp(1j * op.theta0) * upre0
        return y, upre0


# ---------------------------------------------------------------------------
# integration


def simulate(scenario):
    """Fixed-step RK4 run of the averaged model.

    The modulation command passes through a transport-delay history; at
    substage times a three-point parabola through the neighbouring
    samples reads the delayed signal, keeping its error below the
    integrator's own. With no delay the converter voltage is solved
    algebraically at every stage. The run aborts with the partial trace
    attached once any per-unit state leaves the trusted region.
    """
    rt = _Runtime(scenario)
    h = scenario.time_step
    n = scenario.n_steps
    if scenario.start == "equilibrium":
        y, upre0 = rt.equilibrium(scenario)
    else:
        y = np.zeros(rt.n_state, dtype=complex)
        y[rt.iE] = rt.Vref
        upre0 = 0.0 + 0.0j
    if rt.Td > 0.0:
        n_delay = round(rt.Td / h)
        if n_delay < 1 or abs(n_delay * h - rt.Td) > 1e-12:
            raise ConfigError(
                "time step must divide the transport delay into whole samples"
            )
        # hist[j] holds the command at time (j - pad)*h; the extra pad
        # sample lets the substage parabola reach one step further back
        pad = n_delay + 1
        hist = np.empty(n + pad + 1, dtype=complex)
        if scenario.start == "equilibrium":
            for j in range(pad):
                hist[j] = upre0 * cmath.exp(1j * rt.w1 * (j - pad) * h)
        else:
            hist[:pad] = 0.0
    else:
        n_delay = 0
        pad = 0
        hist = None

    t_arr = np.arange(n + 1) * h
    i_arr = np.empty(n + 1, dtype=complex)
    v_arr = np.empty(n + 1, dtype=complex)
    p_arr = np.empty(n + 1)
    q_arr = np.empty(n + 1)
    th_arr = np.empty(n + 1)
    e_arr = np.empty(n + 1)

    def record(k, vpcc, p, q):
        i_arr[k] = y[0]
        v_arr[k] = vpcc
        p_arr[k] = p
        q_arr[k] = q
        th_arr[k] = y[rt.ith].real
        e_arr[k] = y[rt.iE].real

    def partial(k):
        return Trace(
            t_arr[:k], i_arr[:k], v_arr[:k], p_arr[:k], q_arr[:k],
            th_arr[:k], e_arr[:k], rt.w1,
        )

    events = list(scenario.events)
    next_ev = 0
    derivs = rt.derivs
    for k in range(n):
        t = t_arr[k]
        while next_ev < len(events) and events[next_ev][0] <= t + 1e-12:
            _, section, field, value = events[next_ev]
            rt.apply_event(section, field, value)
            next_ev += 1
        if n_delay:
            ui0 = hist[k + 1]
        else:
            ui0 = rt.algebraic_ui(t, y)
        u_pre, vpcc, p, q = rt.outputs(t, y, ui0)
        record(k, vpcc, p, q)
        if n_delay:
            hist[k + pad] = u_pre
            # parabola through (k, k+1, k+2) read at the half sample
            uih = -0.125 * hist[k] + 0.75 * hist[k + 1] + 0.375 * hist[k + 2]
            ui1 = hist[k + 2]
            k1 = derivs(t, y, ui0)
            y2 = y + (0.5 * h) * k1
            k2 = derivs(t + 0.5 * h, y2, uih)
            y3 = y + (0.5 * h) * k2
            k3 = derivs(t + 0.5 * h, y3, uih)
            y4 = y + h * k3
            k4 = derivs(t + h, y4, ui1)
        else:
            k1 = derivs(t, y, ui0)
            y2 = y + (0.5 * h) * k1
            k2 = derivs(t + 0.5 * h, y2, rt.algebraic_ui(t + 0.5 * h, y2))
            y3 = y + (0.5 * h) * k2
            k3 = derivs(t + 0.5 * h, y3, rt.algebraic_ui(t + 0.5 * h, y3))
            y4 = y + h * k3
            k4 = derivs(t + h, y4, rt.algebraic_ui(t + h, y4))
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        worst = max(abs(y[0]), abs(y[rt.iz]), abs(y[rt.iE]))
        if not np.isfinite(y).all() or worst > BLOWUP_LIMIT:
            raise SimulationBlowup(
                f"state left the trusted region at t={t_arr[k + 1]:.5f} s "
                f"(ledger magnitude {worst:.1f} pu > {BLOWUP_LIMIT:.0f})",
                trace=partial(k + 1),
            )
    t = t_arr[n]
    if n_delay:
        ui0 = hist[n + 1]
    else:
        ui0 = rt.algebraic_ui(t, y)
    _, vpcc, p, q = rt.outputs(t, y, ui0)
    record(n, vpcc, p, q)
    return Trace(t_arr, i_arr, v_arr, p_arr, q_arr, th_arr, e_arr, rt.w1)


# ---------------------------------------------------------------------------
# frequency scans


def _rms(x):
    return math.sqrt(float(np.mean(np.abs(x) ** 2)))


def _check_scan_grid(freqs, window, h, omega1):
    """Leakage-free windowing needs whole periods and whole samples."""
    nw = round(window / h)
    if nw < 100 or abs(nw * h - window) > 1e-9:
        raise ConfigError("scan window must hold a whole number of time steps")
    f1 = omega1 / (2.0 * math.pi)
    if abs(f1 * window - round(f1 * window)) > 1e-6:
        raise ConfigError("scan window must hold whole fundamental periods")
    for f in freqs:
        if f <= 0.0:
            raise ConfigError("scan frequencies must be positive")
        if abs(f * window - round(f * window)) > 1e-6:
            raise ConfigError(
                f"scan frequency {f} Hz does not fit the {window} s window"
            )
        if abs(f - f1) < 0.5 / window:
            raise ConfigError("scan frequencies must avoid the fundamental bin")


def _window_bin(sig, tseg, f):
    return complex((sig * np.exp(-2j * math.pi * f * tseg)).mean())


def scan_impedance(scenario, frequencies, amplitude=0.02,
                   settle=0.4, window=1.0, max_quality=0.05):
    """Measured equivalent impedance, one injection run per frequency.

    Both outer loops are frozen at the operating point, a perturbation
    rides on the grid EMF, and after the settle time the PCC voltage and
    current are projected onto the injection bin over a whole number of
    periods. The fundamental and the probe line are removed before the
    residual is scored; a residual above max_quality fails the scan
    rather than returning a silently polluted point.
    """
    if not 0.0 < amplitude <= 0.02:
        raise ConfigError("impedance probe amplitude must lie in (0, 0.02] pu")
    freqs = np.asarray(frequencies, dtype=float)
    if freqs.ndim != 1 or len(freqs) == 0:
        raise ConfigError("frequency list must be a non-empty 1-d sequence")
    h = scenario.time_step
    _check_scan_grid(freqs, window, h, scenario.cfg.omega1)
    base = dataclasses.replace(
        scenario, freeze_psc=True, freeze_avc=True, duration=settle + window,
        start="equilibrium", events=(), theta_kick=0.0, injection=None,
    )
    k0 = round(settle / h)
    nw = round(window / h)
    f1 = scenario.cfg.omega1 / (2.0 * math.pi)
    values = np.empty(len(freqs), dtype=complex)
    quality = np.empty(len(freqs))
    for m, f in enumerate(freqs):
        sc = dataclasses.replace(
            base, injection=Injection("grid_voltage", float(f), amplitude)
        )
        tr = simulate(sc)
        tseg = tr.t[k0:k0 + nw]
        iseg = tr.i[k0:k0 + nw]
        vseg = tr.v[k0:k0 + nw]
        ci = _window_bin(iseg, tseg, f)
        cv = _window_bin(vseg, tseg, f)
        if abs(ci) < 1e-12:
            raise NumericalError(f"no current response at {f} Hz; cannot divide")
        qs = []
        for seg, c in ((iseg, ci), (vseg, cv)):
            # the fit keeps a dc term: a lossless loop holds the
            # switch-on offset of the probe forever, and that offset is
            # part of the steady orbit rather than pollution
            c1 = _window_bin(seg, tseg, f1)
            recon = (
                seg.mean()
                + c1 * np.exp(2j * math.pi * f1 * tseg)
                + c * np.exp(2j * math.pi * f * tseg)
            )
            qs.append(_rms(seg - recon) / max(abs(ci), 1e-300))
        values[m] = -cv / ci
        quality[m] = max(qs)
    bad = quality > max_quality
    if bad.any():
        worst = int(np.argmax(quality))
        raise NumericalError(
            f"impedance scan rejected {int(bad.sum())} point(s); worst fit "
            f"residual {quality[worst]:.3f} at {freqs[worst]} Hz"
        )
    return ScanResult(freqs, values, quality)


def scan_torque(scenario, frequencies, amplitude=0.005, avc="frozen",
                settle=0.6, window=1.0, max_quality=0.05):
    """Measured angle-to-power response, one modulation run per frequency.

    The synchronization loop is replaced by a driven angle theta0 +
    w1*t + A*sin(2*pi*f*t); the voltage integrator is frozen or left
    active per `avc`. The power projection over whole periods against
    the angle phasor -jA gives the electrical path of the torque
    analysis, measured instead of derived.
    """
    if avc not in ("frozen", "active"):
        raise ConfigError(f"unknown AVC mode {avc!r}")
    if not 0.0 < amplitude <= 0.01:
        raise ConfigError("angle probe amplitude must lie in (0, 0.01] rad")
    freqs = np.asarray(frequencies, dtype=float)
    if freqs.ndim != 1 or len(freqs) == 0:
        raise ConfigError("frequency list must be a non-empty 1-d sequence")
    h = scenario.time_step
    _check_scan_grid(freqs, window, h, scenario.cfg.omega1)
    base = dataclasses.replace(
        scenario, freeze_psc=True, freeze_avc=(avc == "frozen"),
        duration=settle + window, start="equilibrium", events=(),
        theta_kick=0.0, injection=None,
    )
    k0 = round(settle / h)
    nw = round(window / h)
    values = np.empty(len(freqs), dtype=complex)
    quality = np.empty(len(freqs))
    for m, f in enumerate(freqs):
        sc = dataclasses.replace(
            base, injection=Injection("angle", float(f), amplitude)
        )
        tr = simulate(sc)
        tseg = tr.t[k0:k0 + nw]
        pseg = tr.P[k0:k0 + nw]
        p0 = float(pseg.mean())
        cp = 2.0 * _window_bin(pseg - p0, tseg, f)
        recon = (cp * np.exp(2j * math.pi * f * tseg)).real
        q = _rms(pseg - p0 - recon) / max(abs(cp) / math.sqrt(2.0), 1e-300)
        values[m] = cp / (-1j * amplitude)
        quality[m] = q
    bad = quality > max_quality
    if bad.any():
        worst = int(np.argmax(quality))
        raise NumericalError(
            f"torque scan rejected {int(bad.sum())} point(s); worst fit "
            f"residual {quality[worst]:.3f} at {freqs[worst]} Hz"
        )
    return ScanResult(freqs, values, quality)


# ---------------------------------------------------------------------------
# trace classification


def classify_stability(trace, window_start=0.0):
    """Growth-rate verdict on the power oscillation of one window.

    The active power is detrended linearly, the log of its rectified
    peak envelope is fitted by least squares for the growth rate, and
    the dominant frequency is the largest single-bin projection over
    [1, 100] Hz. Rates beyond +-0.5 Np/s are called unstable/stable,
    anything slower is marginal. Feed a perturbed or switching trace: a
    flat equilibrium has no envelope to classify and comes back
    marginal by construction.
    """
    period = 2.0 * math.pi / trace.omega1
    mask = trace.t >= window_start - 1e-12
    t = trace.t[mask]
    p = trace.P[mask]
    if len(t) < 32 or t[-1] - t[0] < 20.0 * period - 1e-9:
        raise ConfigError(
            "classification window must span at least 20 fundamental periods"
        )
    trend = np.polyval(np.polyfit(t, p, 1), t)
    dp = p - trend
    bins = np.arange(1, 101, dtype=float)
    proj = np.abs(np.exp(-2j * math.pi * np.outer(bins, t)) @ dp) / len(t)
    f_dom = float(bins[int(np.argmax(proj))])
    a = np.abs(dp)
    floor = a.max() * 1e-9 + 1e-300
    inner = (a[1:-1] >= a[:-2]) & (a[1:-1] >= a[2:]) & (a[1:-1] > floor)
    idx = np.nonzero(inner)[0] + 1
    if len(idx) >= 4:
        # the detrend residue floors the rectified envelope near 1e-2 of
        # its largest peak; fitting below that flattens decaying cases
        idx = idx[a[idx] > a[idx].max() * 0.02]
    if len(idx) < 4:
        growth = 0.0
    else:
        growth = float(np.polyfit(t[idx], np.log(a[idx]), 1)[0])
    if growth > 0.5:
        label = "unstable"
    elif growth < -0.5:
        label = "stable"
    else:
        label = "marginal"
    return TraceVerdict(label, f_dom, growth)
