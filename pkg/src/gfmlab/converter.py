"""Inner-loop controller blocks, equivalent impedance, and steady state.

The inner loops of a grid-forming converter are described by one uniform
structure: a voltage controller Gv (gated by the flag Fvc) produces a
current reference, a current controller Gi drives the modulation voltage
through the delay Gd, a feedforward Fv decouples the terminal voltage,
and Fcc feeds the measured current back (unity, or a virtual impedance).
Eliminating the internal variables turns the filter inductance into an
equivalent output impedance Zeq and a reference gain Geq; those two
functions carry all inner-loop dynamics seen by the synchronization and
voltage loops.

Per-unit convention: s is in rad/s and a per-unit inductance L enters as
(L/omega1)*s, so the per-unit impedance at s = j*omega1 is exactly jL.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, NumericalError, TransferLimitError
from .ratfun import S, RationalFunction, rf, translate_frequency
from .statespace import ResponseTable

OMEGA1_DEFAULT = 100.0 * math.pi


# ---------------------------------------------------------------------------
# parameter containers


@dataclass(frozen=True)
class CircuitParams:
    """Per-unit single-converter infinite-bus circuit."""

    Lf: float = 0.1
    Lg: float = 0.05
    Vg_mag: float = 1.0
    omega1: float = OMEGA1_DEFAULT
    power_base: float = 3e3
    voltage_base: float = 110.0

    def __post_init__(self):
        if self.Lf <= 0.0:
            raise ValueError("filter inductance must be positive")
        if self.Lg < 0.0:
            raise ValueError("grid inductance cannot be negative")
        if self.Vg_mag <= 0.0 or self.omega1 <= 0.0:
            raise ValueError("grid voltage and nominal frequency must be positive")


@dataclass(frozen=True)
class OuterLoopParams:
    """Power-synchronization and ac-voltage control settings."""

    Kpsc: float = 0.1
    omega_p: float = 2.0 * math.pi * 3.0
    Kiv: float = 0.0
    Pref: float = 0.0
    Vref: float = 1.0

    def __post_init__(self):
        if self.Kpsc <= 0.0 or self.omega_p <= 0.0:
            raise ValueError("PSC gain and low-pass corner must be positive")
        if self.Kiv < 0.0:
            raise ValueError("AVC integral gain cannot be negative")
        if self.Vref <= 0.0:
            raise ValueError("voltage reference must be positive")

    def psc_controller(self, omega1=OMEGA1_DEFAULT):
        """G_psc mapping per-unit power error to rad/s frequency deviation."""
        return rf(
            [omega1 * self.Kpsc * self.omega_p], [self.omega_p, 1.0]
        )


@dataclass(frozen=True)
class DelayModel:
    """Computation/PWM transport delay and its rational approximation."""

    Td: float = 0.0
    mode: str = "neglect"
    order: int = 2

    def __post_init__(self):
        if self.Td < 0.0:
            raise ValueError("delay time cannot be negative")
        if self.mode not in ("neglect", "pade"):
            raise ValueError(f"unknown delay mode {self.mode!r}")
        if not 1 <= self.order <= 4:
            raise ValueError("supported approximant orders are 1..4")


def build_delay(model):
    """Rational stand-in for exp(-s*Td).

    The diagonal Pade approximant keeps unit magnitude at every
    frequency, so only the phase is approximate.
    """
    if model.mode == "neglect" or model.Td == 0.0:
        return rf([1.0])
    n = model.order
    num = np.zeros(n + 1)
    den = np.zeros(n + 1)
    for j in range(n + 1):
        c = (
            math.factorial(2 * n - j)
            * math.factorial(n)
            / (math.factorial(2 * n) * math.factorial(j) * math.factorial(n - j))
        )
        num[j] = c * (-model.Td) ** j
        den[j] = c * model.Td**j
    return rf(num, den)


# ---------------------------------------------------------------------------
# controller blocks


def resonance_notch(omega1=OMEGA1_DEFAULT, zeta=0.707):
    """Unity-gain notch with a zero pair at the fundamental frequency."""
    return rf([omega1**2, 0.0, 1.0], [omega1**2, 2.0 * zeta * omega1, 1.0])


def build_virtual_admittance(
    Lv,
    Rv,
    frame="stationary",
    omega1=OMEGA1_DEFAULT,
    notch_zeta=0.707,
    hpf_corner=2.0 * math.pi * 5.0,
):
    """Voltage controller emulating an inductance without differentiation.

    The virtual resistance is filtered so it does not load the
    fundamental: a notch in the stationary frame, a high-pass when the
    controller runs in the rotating frame (where the fundamental is dc).
    The rotating form keeps the jw1*Lv coupling of the emulated inductor
    so both variants present the same reactance at the fundamental.
    """
    if Lv <= 0.0:
        raise ValueError("virtual inductance must be positive")
    if Rv < 0.0:
        raise ValueError("virtual resistance cannot be negative")
    if frame == "stationary":
        ind = (Lv / omega1) * S
        return 1.0 / (ind + resonance_notch(omega1, notch_zeta) * Rv)
    if frame == "rotating":
        ind = (Lv / omega1) * (S + 1j * omega1)
        hpf = rf([0.0, 1.0], [hpf_corner, 1.0])
        return 1.0 / (ind + hpf * Rv)
    raise ValueError(f"unknown frame {frame!r}")


def build_current_controller(
    kind="quasi_pr",
    frame="stationary",
    omega1=OMEGA1_DEFAULT,
    kpi=2.0,
    kri=0.4,
    omega_ri=2.0 * math.pi,
    kii=0.2,
):
    """Current controller in the requested frame.

    The quasi-PR design lives in the stationary frame; its rotating-frame
    form is the frequency-translated block, which preserves the closed
    loop exactly. The PI form is native to the rotating frame and is kept
    untranslated there.
    """
    if min(kpi, kri, omega_ri, kii) < 0.0:
        raise ValueError("controller gains cannot be negative")
    if kind == "quasi_pr":
        g = kpi + rf([0.0, kri], [omega1**2, 2.0 * omega_ri, 1.0])
        if frame == "rotating":
            g = translate_frequency(g, 1j * omega1)
        return g
    if kind == "pi":
        return kpi + rf([kii * omega1], [0.0, 1.0])
    raise ValueError(f"unknown current controller kind {kind!r}")


# ---------------------------------------------------------------------------
# uniform inner-loop description


@dataclass(frozen=True)
class InnerLoopParams:
    """Gains and switches of the virtual-admittance based inner loop.

    This is the parametric layer: build() freezes it into the block-level
    InnerLoopConfig. Keeping the scalars around allows cheap rebuilds
    when a simulation event switches one of them at run time.

    rv_filter selects how the virtual resistance avoids the fundamental:
    "notch" (stationary-frame design), "hpf" (rotating-frame design), or
    "auto" to follow the frame tag. A rotating-frame config with
    rv_filter="notch" carries the frequency-translated stationary blocks,
    which is the matched-dynamics counterpart used for frame-realization
    comparisons.
    """

    frame: str = "stationary"
    Lv: float = 0.3
    Rv: float = 0.1
    rv_filter: str = "auto"
    notch_zeta: float = 0.707
    hpf_corner_hz: float = 5.0
    current_kind: str = "quasi_pr"
    kpi: float = 2.0
    kri: float = 0.4
    omega_ri: float = 2.0 * math.pi
    kii: float = 0.2
    Fv: float = 0.0
    Td: float = 0.0
    delay_mode: str = "neglect"
    delay_order: int = 2

    def __post_init__(self):
        if self.frame not in ("stationary", "rotating"):
            raise ValueError(f"unknown frame {self.frame!r}")
        if self.rv_filter not in ("auto", "notch", "hpf"):
            raise ValueError(f"unknown rv_filter {self.rv_filter!r}")
        if self.Fv not in (0.0, 1.0):
            raise ValueError("voltage decoupling flag must be 0 or 1")

    def build(self, omega1=OMEGA1_DEFAULT):
        """Freeze into an InnerLoopConfig with concrete blocks."""
        filt = self.rv_filter
        if filt == "auto":
            filt = "notch" if self.frame == "stationary" else "hpf"
        if filt == "notch":
            gv = build_virtual_admittance(
                self.Lv, self.Rv, "stationary", omega1, self.notch_zeta
            )
            if self.frame == "rotating":
                gv = translate_frequency(gv, 1j * omega1)
        else:
            gv = build_virtual_admittance(
                self.Lv,
                self.Rv,
                "rotating",
                omega1,
                hpf_corner=2.0 * math.pi * self.hpf_corner_hz,
            )
        gi = build_current_controller(
            self.current_kind,
            self.frame,
            omega1,
            kpi=self.kpi,
            kri=self.kri,
            omega_ri=self.omega_ri,
            kii=self.kii,
        )
        return InnerLoopConfig(
            frame=self.frame,
            Fvc=1,
            Fcc=rf([1.0]),
            Gv=gv,
            Gi=gi,
            Fv=rf([self.Fv]),
            Gd=DelayModel(self.Td, self.delay_mode, self.delay_order),
            omega1=omega1,
            source=self,
        )


@dataclass(frozen=True)
class InnerLoopConfig:
    """Uniform inner-loop structure with concrete transfer functions.

    Blocks are expressed in the frame named by the tag: functions of the
    stationary-frame s for "stationary", of the rotating-frame s for
    "rotating". The delay stays symbolic (DelayModel) so analyses can
    choose their own approximation order consistently.
    """

    frame: str
    Fvc: int
    Fcc: RationalFunction
    Gv: RationalFunction
    Gi: RationalFunction
    Fv: RationalFunction
    Gd: DelayModel
    omega1: float = OMEGA1_DEFAULT
    source: InnerLoopParams | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.frame not in ("stationary", "rotating"):
            raise ValueError(f"unknown frame {self.frame!r}")
        if self.Fvc not in (0, 1):
            raise ValueError("voltage control flag must be 0 or 1")


def derive_equivalent_impedance(cfg, Lf):
    """Equivalent output impedance and reference gain of the inner loops.

    Returns (Zeq, Geq) in the frame of cfg. The physical filter term is
    (Lf/omega1)*s in the stationary frame and picks up the j*omega1
    rotation in the rotating frame; rotating-frame configs likewise use
    the frequency-translated delay.
    """
    w1 = cfg.omega1
    gd = build_delay(cfg.Gd)
    filt = (Lf / w1) * S
    if cfg.frame == "rotating":
        gd = translate_frequency(gd, 1j * w1)
        filt = (Lf / w1) * (S + 1j * w1)
    den = gd * (cfg.Gi * cfg.Gv * cfg.Fvc - cfg.Fv) + 1.0
    if np.max(np.abs(den.num)) <= 1e-14 * max(np.max(np.abs(den.den)), 1.0):
        raise NumericalError("inner-loop structure is degenerate (unit loop)")
    zeq = (gd * cfg.Gi * cfg.Fcc + filt) / den
    geq = gd * cfg.Gi * cfg.Gv / den
    return zeq, geq


def impedance_profile(zeq, grid):
    """Sampled resistance/reactance profile of an impedance function.

    The meta field carries the low-frequency resistance metric used by
    the damping trend checks, Re Zeq at 2*pi*5 rad/s.
    """
    grid = np.asarray(grid, dtype=float)
    values = zeq(1j * grid)
    return ResponseTable(
        grid, values, meta={"req_low": low_frequency_resistance(zeq)}
    )


def low_frequency_resistance(zeq):
    """Re Zeq(j*2*pi*5): the resistance that damps near-dc current."""
    return float(np.real(zeq(1j * 2.0 * math.pi * 5.0)))


# ---------------------------------------------------------------------------
# operating point


@dataclass(frozen=True)
class OperatingPoint:
    """Steady-state phasors in the grid-anchored synchronous frame.

    The d axis is aligned with the grid voltage source, so theta0 is the
    power angle of the EMF against the grid. All components are per-unit.
    """

    theta0: float
    E0: float
    Vd0: float
    Vq0: float
    Id0: float
    Iq0: float
    Uid0: float
    Uiq0: float

    @property
    def Ed0(self):
        return self.E0 * math.cos(self.theta0)

    @property
    def Eq0(self):
        return self.E0 * math.sin(self.theta0)

    @property
    def emf(self):
        return complex(self.Ed0, self.Eq0)

    @property
    def vpcc(self):
        return complex(self.Vd0, self.Vq0)

    @property
    def ig(self):
        return complex(self.Id0, self.Iq0)

    @property
    def ui(self):
        return complex(self.Uid0, self.Uiq0)


def _power_flow_residual(theta, E, zeq_val, geq_val, circuit, outer):
    emf = geq_val * E * np.exp(1j * theta)
    ig = (emf - circuit.Vg_mag) / (zeq_val + 1j * circuit.Lg)
    vpcc = circuit.Vg_mag + 1j * circuit.Lg * ig
    p = (vpcc * np.conj(ig)).real
    return np.array([p - outer.Pref, abs(vpcc) - outer.Vref]), ig, vpcc


def _solve_power_flow(zeq_val, geq_val, circuit, outer, tol=1e-12, max_iter=50):
    """Newton solve of the two-bus power flow behind the equivalent impedance.

    Unknowns are the EMF angle and magnitude; residuals are the PCC
    active power against Pref and the PCC voltage magnitude against
    Vref, which are exactly the quantities the outer loops regulate.
    """
    x_react = circuit.Lg + float(np.imag(zeq_val))
    # the AVC holds |v_pcc| at Vref, so the static limit is set by the
    # grid inductance alone; the converter raises its EMF as needed
    if circuit.Lg > 0.0:
        ceiling = outer.Vref * circuit.Vg_mag / circuit.Lg
        if abs(outer.Pref) >= ceiling:
            raise TransferLimitError(
                f"requested power {outer.Pref} exceeds the static transfer "
                f"limit {ceiling:.3f} of the grid reactance"
            )
    arg = outer.Pref * x_react / (outer.Vref * circuit.Vg_mag)
    clamp = math.sin(math.radians(80))
    theta = math.asin(min(max(arg, -clamp), clamp))
    E = outer.Vref
    stiff_bus = circuit.Lg == 0.0
    if stiff_bus and abs(circuit.Vg_mag - outer.Vref) > 1e-9:
        raise TransferLimitError(
            "the PCC voltage at a stiff bus equals the grid voltage and "
            "cannot be regulated to a different Vref"
        )
    h = 1e-7
    for _ in range(max_iter):
        res, ig, vpcc = _power_flow_residual(theta, E, zeq_val, geq_val, circuit, outer)
        if stiff_bus:
            # voltage residual is identically zero, power alone fixes theta
            if abs(res[0]) < tol:
                return theta, E, ig, vpcc
            rp = _power_flow_residual(theta + h, E, zeq_val, geq_val, circuit, outer)[0][0]
            rm = _power_flow_residual(theta - h, E, zeq_val, geq_val, circuit, outer)[0][0]
            dres = (rp - rm) / (2.0 * h)
            if dres == 0.0:
                raise ConvergenceError("flat power residual in operating-point solve")
            theta -= res[0] / dres
            continue
        if np.max(np.abs(res)) < tol:
            return theta, E, ig, vpcc
        jac = np.zeros((2, 2))
        for k, (dth, dE) in enumerate(((h, 0.0), (0.0, h))):
            rp = _power_flow_residual(theta + dth, E + dE, zeq_val, geq_val, circuit, outer)[0]
            rm = _power_flow_residual(theta - dth, E - dE, zeq_val, geq_val, circuit, outer)[0]
            jac[:, k] = (rp - rm) / (2.0 * h)
        try:
            step = np.linalg.solve(jac, res)
        except np.linalg.LinAlgError:
            raise ConvergenceError("singular Jacobian in operating-point solve")
        theta -= step[0]
        E -= step[1]
    raise ConvergenceError(
        f"operating point did not converge in {max_iter} iterations "
        f"(residual {np.max(np.abs(res)):.2e})"
    )


def solve_operating_point(circuit, outer, zeq, geq=None, frame="stationary"):
    """Steady state of the converter behind its equivalent impedance.

    With geq omitted the EMF is taken as an ideal source (theta0, E0
    describe the effective EMF behind Zeq, which is the operating point
    the power-angle formulas use). Passing the reference gain Geq makes
    theta0, E0 the raw outer-loop states instead: the EMF reference is
    scaled and rotated by Geq(j*omega1) before it reaches the circuit,
    which is what the time-domain model and the assembled small-signal
    models need. Both flavors share identical current and voltage
    phasors.
    """
    s0 = 1j * circuit.omega1 if frame == "stationary" else 0.0
    zeq_val = complex(zeq(s0))
    geq_val = complex(geq(s0)) if geq is not None else 1.0 + 0.0j
    theta, E, ig, vpcc = _solve_power_flow(zeq_val, geq_val, circuit, outer)
    ui = vpcc + 1j * circuit.Lf * ig
    return OperatingPoint(
        theta0=float(theta),
        E0=float(E),
        Vd0=float(vpcc.real),
        Vq0=float(vpcc.imag),
        Id0=float(ig.real),
        Iq0=float(ig.imag),
        Uid0=float(ui.real),
        Uiq0=float(ui.imag),
    )
