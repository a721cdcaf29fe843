"""Closed-loop small-signal models of the synchronization-driven converter.

The linearized system is assembled in the grid-anchored synchronous
frame. Vector signals (voltage and current pairs) ride on complex
transfer blocks; the power-synchronization angle and the voltage
magnitude are scalar states. The two controller realizations share the
same outer loops and circuit and differ only in where the angle couples
into the signal path:

* stationary realization: the controller acts on stationary-frame
  signals, so the angle enters once, through the rotation that builds
  the EMF reference. Every control block G(s) appears here as
  G(s + j*omega1).
* rotating realization: measurements are rotated into the control frame
  and the voltage command is rotated back, so the angle couples at four
  additional points with gains fixed by the operating-point phasors.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .converter import OMEGA1_DEFAULT, build_delay
from .errors import NumericalError
from .ratfun import rf, translate_frequency
from .statespace import BlockDiagram, RealStateSpace


@dataclass(frozen=True)
class FrameCouplings:
    """Angle-coupling gain vectors evaluated at an operating point.

    Each array maps the scalar angle deviation to a d/q pair: e_theta
    rotates the EMF reference, u_theta and i_theta carry the measurement
    rotations into the control frame, ui_theta carries the command back.
    """

    e_theta: np.ndarray
    u_theta: np.ndarray
    i_theta: np.ndarray
    ui_theta: np.ndarray


def coupling_matrices(op, overrides=None):
    """Frame-coupling vectors of an operating point, with optional overrides.

    overrides maps field names of FrameCouplings to replacement 2-vectors;
    it exists so ablation studies can switch individual couplings off or
    redirect them without touching the assembly code.
    """
    base = {
        "e_theta": np.array([-op.Eq0, op.Ed0]),
        "u_theta": np.array([op.Vq0, -op.Vd0]),
        "i_theta": np.array([op.Iq0, -op.Id0]),
        "ui_theta": np.array([-op.Uiq0, op.Uid0]),
    }
    if overrides:
        unknown = set(overrides) - set(base)
        if unknown:
            raise ValueError(f"unknown coupling names: {sorted(unknown)}")
        for name, vec in overrides.items():
            base[name] = np.asarray(vec, dtype=float).reshape(2)
    return FrameCouplings(**base)


def _rotation(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def _column(vec):
    return np.asarray(vec, dtype=float).reshape(2, 1)


@dataclass
class SmallSignalModel:
    """One assembled model with named ports.

    inputs and outputs list the port names in order; slices map names to
    column/row ranges of the underlying state-space matrices.
    """

    ss: RealStateSpace
    inputs: tuple
    outputs: tuple
    input_slices: dict
    output_slices: dict
    realization: str
    omega1: float
    meta: dict = field(default_factory=dict)

    @property
    def n_states(self):
        return self.ss.n_states

    def poles(self):
        return self.ss.poles()

    def frequency_response(self, output, input, omega):
        """Complex response of one scalar-to-scalar channel."""
        rows = self.output_slices[output]
        cols = self.input_slices[input]
        if rows.stop - rows.start != 1 or cols.stop - cols.start != 1:
            raise ValueError("frequency_response addresses scalar channels only")
        resp = self.ss.freq_response(omega)
        return resp[:, rows.start, cols.start]


def _system_frame_blocks(cfg, omega1):
    """Control blocks as seen from the synchronous frame.

    Stationary-frame blocks are shifted by j*omega1; rotating-frame
    blocks already live there. The transport delay acts on the modulated
    stationary signal in either case, so it is always shifted.
    """
    shift = 1j * omega1
    gd = translate_frequency(build_delay(cfg.Gd), shift)
    if cfg.frame == "stationary":
        return (
            translate_frequency(cfg.Gv, shift),
            translate_frequency(cfg.Gi, shift),
            translate_frequency(cfg.Fcc, shift),
            translate_frequency(cfg.Fv, shift),
            gd,
        )
    return cfg.Gv, cfg.Gi, cfg.Fcc, cfg.Fv, gd


def _build(circuit, outer, cfg, op, couplings, freeze_avc, angle_input):
    omega1 = circuit.omega1
    Lt = circuit.Lf + circuit.Lg
    gv, gi, fcc, fv, gd = _system_frame_blocks(cfg, omega1)
    d = BlockDiagram()

    if angle_input:
        d.add_input("theta", dim=1)
    else:
        d.add_input("pref", dim=1)
    d.add_input("vref", dim=1)

    # circuit: the converter voltage drives the series inductance; the
    # bus divides it because the grid source is stiff
    d.add_tf(
        "ig",
        rf([1.0], [1j * omega1 * Lt / omega1, Lt / omega1]),
        {"ui": 1.0},
        dim=2,
    )
    d.add_gain("u", {"ui": circuit.Lg / Lt}, dim=2)

    # measured power and voltage magnitude are frame-invariant forms
    v0 = np.array([[op.Vd0, op.Vq0]])
    i0 = np.array([[op.Id0, op.Iq0]])
    vmag = math.hypot(op.Vd0, op.Vq0)
    d.add_gain("p", {"u": i0, "ig": v0}, dim=1)
    d.add_gain("vmag", {"u": v0 / vmag}, dim=1)

    if not angle_input:
        gpsc_i = outer.psc_controller(omega1) * rf([1.0], [0.0, 1.0])
        d.add_tf("theta", gpsc_i, {"pref": 1.0, "p": -1.0}, dim=1)
    if freeze_avc or outer.Kiv == 0.0:
        # a zero-gain integrator would park a spurious eigenvalue at the
        # origin, so an inactive regulator is dropped instead
        d.add_gain("emag", {"vref": 0.0}, dim=1)
    else:
        d.add_tf("emag", rf([outer.Kiv], [0.0, 1.0]), {"vref": 1.0, "vmag": -1.0}, dim=1)

    fvc = float(cfg.Fvc)
    if cfg.frame == "stationary":
        # single angle coupling: the EMF reference is rotated into the
        # stationary frame by the synchronization angle
        d.add_gain(
            "eref",
            {
                "emag": _column([math.cos(op.theta0), math.sin(op.theta0)]),
                "theta": _column(couplings.e_theta),
            },
            dim=2,
        )
        d.add_tf("iref", gv, {"eref": 1.0, "u": -fvc}, dim=2)
        d.add_tf("ifb", fcc, {"ig": 1.0}, dim=2)
        d.add_tf("ucc", gi, {"iref": 1.0, "ifb": -1.0}, dim=2)
        d.add_tf("vff", fv, {"u": 1.0}, dim=2)
        d.add_gain("ucmd", {"ucc": 1.0, "vff": 1.0}, dim=2)
    else:
        # measurement rotations into the control frame, command rotation
        # back out; the static rotations carry the angle couplings
        rot_in = _rotation(-op.theta0)
        d.add_gain(
            "u_c",
            {
                "u": complex(math.cos(op.theta0), -math.sin(op.theta0)),
                "theta": rot_in @ _column(couplings.u_theta),
            },
            dim=2,
        )
        d.add_gain(
            "i_c",
            {
                "ig": complex(math.cos(op.theta0), -math.sin(op.theta0)),
                "theta": rot_in @ _column(couplings.i_theta),
            },
            dim=2,
        )
        d.add_gain("eref_c", {"emag": _column([1.0, 0.0])}, dim=2)
        d.add_tf("iref_c", gv, {"eref_c": 1.0, "u_c": -fvc}, dim=2)
        d.add_tf("ifb_c", fcc, {"i_c": 1.0}, dim=2)
        d.add_tf("ucc_c", gi, {"iref_c": 1.0, "ifb_c": -1.0}, dim=2)
        d.add_tf("vff_c", fv, {"u_c": 1.0}, dim=2)
        d.add_gain(
            "ucmd",
            {
                "ucc_c": complex(math.cos(op.theta0), math.sin(op.theta0)),
                "vff_c": complex(math.cos(op.theta0), math.sin(op.theta0)),
                "theta": _column(couplings.ui_theta),
            },
            dim=2,
        )
    d.add_tf("ui", gd, {"ucmd": 1.0}, dim=2)

    inputs = ["theta", "vref"] if angle_input else ["pref", "vref"]
    outputs = ["p", "vmag", "u", "ig"] if angle_input else ["p", "vmag", "theta", "u", "ig"]
    ss = d.realize(outputs, inputs)

    def spans(names):
        out, pos = {}, 0
        for name in names:
            width = d.signal_dim(name)
            out[name] = slice(pos, pos + width)
            pos += width
        return out

    return SmallSignalModel(
        ss=ss,
        inputs=tuple(inputs),
        outputs=tuple(outputs),
        input_slices=spans(inputs),
        output_slices=spans(outputs),
        realization=cfg.frame,
        omega1=omega1,
        meta={"freeze_avc": bool(freeze_avc), "angle_input": bool(angle_input)},
    )


def assemble_model(circuit, outer, cfg, op, coupling_overrides=None, freeze_avc=False):
    """Closed-loop model driven by the power and voltage references.

    The operating point must carry the raw outer-loop reference in
    theta0/E0 (the solve flavor that divides the reference gain out), so
    that the coupling vectors and the reference rotation are consistent
    with the states being perturbed.
    """
    couplings = coupling_matrices(op, coupling_overrides)
    return _build(circuit, outer, cfg, op, couplings, freeze_avc, angle_input=False)


def angle_injection_model(circuit, outer, cfg, op, coupling_overrides=None, freeze_avc=True):
    """Open-synchronization model with the angle as an external input.

    This is the plant the torque analysis approximates: the electrical
    and voltage-regulation dynamics respond to an imposed angle while the
    power-synchronization loop is removed. With freeze_avc the magnitude
    regulator is pinned as well.
    """
    couplings = coupling_matrices(op, coupling_overrides)
    return _build(circuit, outer, cfg, op, couplings, freeze_avc, angle_input=True)


def closed_loop_poles(model):
    return model.poles()


def is_stable(poles, margin=0.0):
    """True when every eigenvalue sits left of -margin."""
    return bool(np.max(np.real(poles)) < -margin)


def damping_ratio(pole):
    """Fraction of critical damping of one oscillatory mode."""
    mag = abs(pole)
    if mag == 0.0:
        return 1.0
    return float(-pole.real / mag)


def subsynchronous_mode(poles, omega1=OMEGA1_DEFAULT, band=(0.02, 0.9)):
    """Least-damped mode whose power oscillation is subsynchronous.

    Modes are classified by their synchronous-frame frequency, which is
    how fast the measured power oscillates. The floor skips the quasi-dc
    images that stationary-frame fundamental-frequency modes leave in
    the rotating frame; those are synchronous phenomena, not
    subsynchronous ones.
    """
    lo, hi = band
    cands = [p for p in poles if lo * omega1 < p.imag < hi * omega1]
    if not cands:
        return None
    return max(cands, key=lambda p: p.real)


def synchronous_mode(poles, omega1=OMEGA1_DEFAULT, band=(0.7, 1.3)):
    """Least-damped mode in the synchronous band, or None.

    A mode here makes the power oscillate near the fundamental and
    leaves a dc offset in the stationary-frame current, the signature
    that separates synchronous from subsynchronous oscillations.
    """
    lo, hi = band
    cands = [p for p in poles if lo * omega1 <= p.imag <= hi * omega1]
    if not cands:
        return None
    return max(cands, key=lambda p: p.real)


@dataclass
class StepResult:
    """Step trajectory of one scalar channel with its headline metrics."""

    t: np.ndarray
    y: np.ndarray
    final: float
    overshoot: float
    settling_time: float


def step_response(model, input="pref", output="p", amplitude=1.0, t_end=2.0, dt=1e-4, settle_band=0.02):
    """Reference-step trajectory via exact zero-order-hold discretization.

    overshoot is the peak excursion past the settled value, relative to
    the step size; settling_time is the last exit from the +-settle_band
    envelope around the settled value.
    """
    cols = model.input_slices[input]
    rows = model.output_slices[output]
    if cols.stop - cols.start != 1 or rows.stop - rows.start != 1:
        raise ValueError("step_response addresses scalar channels only")
    ss = model.ss
    poles = ss.poles()
    if np.max(poles.real) >= 0.0:
        raise NumericalError("step response of an unstable model does not settle")
    u = np.zeros(ss.n_inputs)
    u[cols.start] = amplitude

    n = ss.n_states
    aug = np.zeros((n + 1, n + 1))
    aug[:n, :n] = ss.A * dt
    aug[:n, n] = (ss.B @ u) * dt
    phi = expm(aug)
    ad, bd = phi[:n, :n], phi[:n, n]

    steps = int(round(t_end / dt))
    t = np.arange(steps + 1) * dt
    crow = ss.C[rows.start]
    dterm = float(ss.D[rows.start] @ u)
    y = np.empty(steps + 1)
    x = np.zeros(n)
    for k in range(steps + 1):
        y[k] = crow @ x + dterm
        x = ad @ x + bd

    final = float(-crow @ np.linalg.solve(ss.A, ss.B @ u) + dterm)
    span = abs(final) if final != 0.0 else max(np.max(np.abs(y)), 1e-12)
    outside = np.abs(y - final) > settle_band * span
    if outside[-1]:
        raise NumericalError("trajectory has not settled by t_end; extend the horizon")
    settling = float(t[int(np.max(np.nonzero(outside)[0])) + 1]) if np.any(outside) else 0.0
    # excursion past the settled value in the direction of the step
    if final >= 0.0:
        overshoot = max((np.max(y) - final) / span, 0.0)
    else:
        overshoot = max((final - np.min(y)) / span, 0.0)
    return StepResult(t=t, y=y, final=final, overshoot=overshoot, settling_time=settling)
