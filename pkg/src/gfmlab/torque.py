"""Rotating-frame impedance, power-angle linearization, torque verdicts.

The synchronization loop sees the converter and grid through the active
power's response to the internal angle. This module translates the
stationary-frame equivalent impedance into its rotating-frame d/q pair,
linearizes the power transfer around an operating point (with or without
the voltage regulator closed), and decomposes the loop into synchronizing
and damping torque coefficients whose signs at the torque-balance
crossings decide small-signal stability.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import PchipInterpolator

from .converter import OMEGA1_DEFAULT
from .errors import NumericalError
from .ratfun import RationalFunction, S, poly_add, poly_mul, rf, translate_frequency
from .statespace import ResponseTable


def default_torque_grid(n=400):
    """Logarithmic grid over [1, 100] Hz in rad/s."""
    return 2.0 * math.pi * np.geomspace(1.0, 100.0, n)


# ---------------------------------------------------------------------------
# dq embedding


def _realified(func, context):
    num, den = func.num, func.den
    scale = max(np.max(np.abs(num)), np.max(np.abs(den)))
    resid = max(np.max(np.abs(num.imag)), np.max(np.abs(den.imag)))
    if resid > 1e-12 * scale:
        raise NumericalError(
            f"{context}: imaginary coefficient residue {resid:.2e} "
            "exceeds the symmetrization budget"
        )
    return RationalFunction(num.real, den.real)


@dataclass(frozen=True)
class DqImpedance:
    """Real-coefficient d/q pair; Zd(s) + j*Zq(s) is the rotating-frame
    transfer of a stationary-frame impedance shifted by the fundamental."""

    Zd: RationalFunction
    Zq: RationalFunction

    def at(self, s):
        """Complex recombination Zd(s) + j*Zq(s)."""
        return self.Zd(s) + 1j * self.Zq(s)

    def matrix(self, s):
        """2x2 dq response [[Zd, -Zq], [Zq, Zd]] evaluated at s."""
        zd = complex(self.Zd(s))
        zq = complex(self.Zq(s))
        return np.array([[zd, -zq], [zq, zd]])


def dq_components(zdq):
    """Real d/q component functions of a rotating-frame transfer.

    Any complex-coefficient Z(s) splits as Zd(s) + j*Zq(s) with both
    parts real-coefficient; combining Z with its conjugate-coefficient
    mirror isolates them. The combinations are real to rounding level;
    the residue is checked, then dropped.
    """
    mirror = zdq.conj_coefficients()
    zd = _realified((zdq + mirror) * 0.5, "Zd split")
    zq = _realified((zdq - mirror) * (-0.5j), "Zq split")
    return DqImpedance(zd, zq)


def embed_dq(zab, omega1=OMEGA1_DEFAULT):
    """Split a stationary-frame impedance into rotating-frame d/q parts.

    Zd(s) = [Zab(s+jw1) + Zab(s-jw1)]/2 and Zq the matching difference
    over 2j; equivalently the d/q components of the shifted function.
    """
    if not zab.is_real(1e-9):
        raise ValueError("dq embedding expects a real-coefficient function")
    return dq_components(translate_frequency(zab, 1j * omega1))


def grid_impedance_dq(Lg, omega1=OMEGA1_DEFAULT):
    """dq pair of a per-unit grid inductance: Zd = (Lg/w1)s, Zq = Lg."""
    if Lg == 0.0:
        return DqImpedance(rf([0.0]), rf([0.0]))
    return embed_dq((Lg / omega1) * S, omega1)


# ---------------------------------------------------------------------------
# power-angle relation


def steady_state_power(theta, E, Vg, Z, Zg):
    """Static power entering the measurement bus for a given EMF angle.

    The EMF E*exp(j*theta) behind the converter impedance feeds the grid
    source Vg behind Zg; the returned quantity is the bus power v.i that
    the synchronization loop actually measures, with both impedance pairs
    taken at their fundamental-frequency values.
    """
    rt = float(Z.Zd(0.0).real) + float(Zg.Zd(0.0).real)
    xt = float(Z.Zq(0.0).real) + float(Zg.Zq(0.0).real)
    det = rt * rt + xt * xt
    if abs(det) < 1e-30:
        raise NumericalError("singular impedance denominator in power expression")
    ed = E * math.cos(theta) - Vg
    eq = E * math.sin(theta)
    id_ = (rt * ed + xt * eq) / det
    iq = (-xt * ed + rt * eq) / det
    rg = float(Zg.Zd(0.0).real)
    xg = float(Zg.Zq(0.0).real)
    vd = Vg + rg * id_ - xg * iq
    vq = xg * id_ + rg * iq
    return vd * id_ + vq * iq


def _grid_fundamental(Zg):
    return complex(Zg.Zd(0.0)) + 1j * complex(Zg.Zq(0.0))


def linearized_power_angle(op, Z, Zg):
    """Angle-to-power transfer G_Ptheta(s) around an operating point.

    Propagates the EMF angle perturbation through the total impedance to
    the bus current and voltage, then collects dP = v0.di + i0.dv with
    the d/q impedances kept symbolic. The derivative is assembled here
    rather than copied from a closed form, and is pinned to the
    finite-difference of steady_state_power by the tests.
    """
    r = Z.Zd + Zg.Zd
    x = Z.Zq + Zg.Zq
    # bus-referred weight: dP = v0.di + i0.(Zg di) pairs the current row
    # of Zg with i0, i.e. the transpose acts on the weight side
    wd = op.Vd0 + op.Id0 * Zg.Zd + op.Iq0 * Zg.Zq
    wq = op.Vq0 - op.Id0 * Zg.Zq + op.Iq0 * Zg.Zd
    if np.array_equal(r.den, x.den) and len(wd.den) == 1 and len(wq.den) == 1:
        # assemble over the shared denominator so the quotient keeps its
        # true degree instead of stacking three copies of it; the weights
        # are polynomial whenever the grid branch is
        inner_d = poly_add(-op.Eq0 * r.num, op.Ed0 * x.num)
        inner_q = poly_add(op.Eq0 * x.num, op.Ed0 * r.num)
        num_w = poly_add(poly_mul(wd.num, inner_d), poly_mul(wq.num, inner_q))
        num = poly_mul(num_w, r.den)
        den = poly_add(poly_mul(r.num, r.num), poly_mul(x.num, x.num))
        if np.max(np.abs(den)) <= 1e-14 * max(np.max(np.abs(num)), 1.0):
            raise NumericalError(
                "singular impedance denominator in power linearization"
            )
        return RationalFunction(num, den)
    den = r * r + x * x
    if np.max(np.abs(den.num)) <= 1e-14 * max(np.max(np.abs(den.den)), 1.0):
        raise NumericalError("singular impedance denominator in power linearization")
    di = -op.Eq0 * r + op.Ed0 * x
    dq = op.Eq0 * x + op.Ed0 * r
    return (wd * di + wq * dq) / den


def power_angle_with_avc(op, Z, Zg, Kiv, grid=None):
    """Angle-to-power response with the voltage regulator closed.

    The voltage-channel plants are obtained by linearizing the circuit in
    2x2 dq form at each frequency: the EMF perturbation from (dtheta, dE)
    is rotated into the grid frame, divided by the total impedance matrix
    for the current, and propagated back through the grid impedance for
    the PCC voltage. The integral regulator then closes the magnitude
    loop. Kiv = 0 collapses exactly onto the open-loop linearization.
    """
    if Kiv < 0.0:
        raise ValueError("AVC gain cannot be negative")
    if grid is None:
        grid = default_torque_grid()
    grid = np.asarray(grid, dtype=float)
    gpt = linearized_power_angle(op, Z, Zg)
    vals = np.asarray(gpt(1j * grid), dtype=complex)
    if Kiv > 0.0:
        v0 = np.array([op.Vd0, op.Vq0])
        i0 = np.array([op.Id0, op.Iq0])
        vmag = abs(op.vpcc)
        in_theta = np.array([-op.Eq0, op.Ed0])
        in_e = np.array([math.cos(op.theta0), math.sin(op.theta0)])
        for k, w in enumerate(grid):
            s = 1j * w
            zt = Z.matrix(s) + Zg.matrix(s)
            zg = Zg.matrix(s)
            try:
                dig = np.linalg.solve(zt, np.column_stack([in_theta, in_e]))
            except np.linalg.LinAlgError:
                raise NumericalError(
                    f"singular impedance matrix at {w / (2 * math.pi):.3f} Hz"
                )
            dv = zg @ dig
            g_pe = v0 @ dig[:, 1] + i0 @ dv[:, 1]
            g_vth = (v0 @ dv[:, 0]) / vmag
            g_ve = (v0 @ dv[:, 1]) / vmag
            reg = Kiv / s
            vals[k] = vals[k] - g_pe * reg / (1.0 + reg * g_ve) * g_vth
    return ResponseTable(grid, vals, meta={"kiv": float(Kiv)})


# ---------------------------------------------------------------------------
# complex torque coefficients


@dataclass(frozen=True)
class Crossing:
    omega_star: float
    net_damping: float


@dataclass(frozen=True)
class CriticalMode:
    omega_star: float
    net_damping: float
    label: str


@dataclass(frozen=True)
class TorqueProfile:
    omega: np.ndarray
    Ke: np.ndarray
    De: np.ndarray
    Km: np.ndarray
    Dm: np.ndarray
    intersections: tuple


@dataclass(frozen=True)
class StabilityVerdict:
    stable: bool
    critical_modes: tuple
    no_crossing: bool = False


def _electrical_evaluators(electrical):
    if isinstance(electrical, RationalFunction):

        def ke(w):
            return float(np.real(electrical(1j * w)))

        def de(w):
            return float(np.imag(electrical(1j * w)) / w)

        return ke, de, None
    om = np.asarray(electrical.omega, dtype=float)
    re_i = PchipInterpolator(om, np.real(electrical.values))
    im_i = PchipInterpolator(om, np.imag(electrical.values))

    def ke(w):
        return float(re_i(w))

    def de(w):
        return float(im_i(w) / w)

    return ke, de, om


def _refine_crossing(f, a, b, fa, fb, rtol=1e-4):
    while (b - a) > rtol * 0.5 * (a + b):
        m = 0.5 * (a + b)
        fm = f(m)
        if fm == 0.0:
            return m
        if (fa < 0.0) != (fm < 0.0):
            b, fb = m, fm
        else:
            a, fa = m, fm
    return 0.5 * (a + b)


def complex_torque_profile(electrical, gpsc, grid=None):
    """Synchronizing/damping coefficient profile of both torque paths.

    The mechanical path is the inverse PSC gain; the electrical path is
    the angle-to-power response, given either analytically or as a
    sampled table (measured or computed). The angle loop closes through
    the synchronization integrator, so the mechanical torque at frequency
    w is jw/Gpsc(jw) = -w^2*Dm + jw*Km: resonance candidates sit where
    the electrical stiffness Ke balances the w^2*Dm inertia term, and
    growth or decay there is set by the total damping Km + De. Crossings
    of that balance are located on the grid and refined by bisection,
    each carrying its net damping.
    """
    ke_f, de_f, native = _electrical_evaluators(electrical)
    if grid is None:
        grid = native if native is not None else default_torque_grid()
    grid = np.asarray(grid, dtype=float)

    gp_vals = np.asarray(gpsc(1j * grid), dtype=complex)
    if np.any(gp_vals == 0.0):
        raise NumericalError("PSC transfer is zero on the torque grid")
    inv = 1.0 / gp_vals
    km = np.real(inv)
    dm = np.imag(inv) / grid
    if isinstance(electrical, RationalFunction):
        e_vals = np.asarray(electrical(1j * grid), dtype=complex)
        ke = np.real(e_vals)
        de = np.imag(e_vals) / grid
    else:
        ke = np.array([ke_f(w) for w in grid])
        de = np.array([de_f(w) for w in grid])

    def km_f(w):
        v = 1.0 / complex(gpsc(1j * w))
        return float(np.real(v))

    def dm_f(w):
        v = 1.0 / complex(gpsc(1j * w))
        return float(np.imag(v) / w)

    def balance(w):
        return ke_f(w) - w * w * dm_f(w)

    def net(w):
        return float(km_f(w) + de_f(w))

    total = ke - grid * grid * dm
    crossings = []
    for i in range(len(grid) - 1):
        if total[i] == 0.0:
            w_star = grid[i]
        elif total[i] * total[i + 1] < 0.0:
            w_star = _refine_crossing(
                balance, grid[i], grid[i + 1], total[i], total[i + 1]
            )
        else:
            continue
        crossings.append(Crossing(float(w_star), net(w_star)))
    if len(grid) and total[-1] == 0.0:
        crossings.append(Crossing(float(grid[-1]), net(grid[-1])))

    return TorqueProfile(
        omega=grid,
        Ke=ke,
        De=de,
        Km=km,
        Dm=dm,
        intersections=tuple(crossings),
    )


def net_damping_verdict(profile, omega1=OMEGA1_DEFAULT):
    """Stability call from the torque-balance crossings.

    Stable iff the net damping is positive at every torque-balance
    crossing carried by the profile; a crossing below 0.9*omega1 is
    labeled SSO, at or above it SO. An empty crossing set is reported
    stable with the no-crossing flag raised so callers can tell the
    difference.
    """
    om = profile.omega
    if len(om) < 400:
        raise ValueError("verdict needs at least 400 grid points")
    if om[0] > 2.0 * math.pi * 1.0 + 1e-9 or om[-1] < 2.0 * math.pi * 100.0 - 1e-9:
        raise ValueError("verdict grid must cover [2*pi*1, 2*pi*100] rad/s")
    if not profile.intersections:
        return StabilityVerdict(stable=True, critical_modes=(), no_crossing=True)
    modes = tuple(
        CriticalMode(
            c.omega_star,
            c.net_damping,
            "SSO" if c.omega_star < 0.9 * omega1 else "SO",
        )
        for c in profile.intersections
    )
    stable = all(m.net_damping > 0.0 for m in modes)
    return StabilityVerdict(stable=stable, critical_modes=modes, no_crossing=False)
