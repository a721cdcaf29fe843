"""Rational functions in the Laplace variable with complex coefficients.

Everything the workbench derives analytically (controller blocks,
equivalent impedances, torque coefficients) is a ratio of polynomials in
s, where s carries rad/s. Coefficients are stored in ascending powers,
the denominator is kept monic, and no pole/zero cancellation is ever
attempted: degree growth is accepted and capped instead, which keeps the
algebra exact and the failure mode explicit.
"""

import math

import numpy as np

from .errors import DegreeCapError, NumericalError, RootfindingError

DEGREE_CAP = 64


def _as_poly(c):
    arr = np.atleast_1d(np.asarray(c, dtype=complex))
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("polynomial coefficients must be a nonempty 1-d sequence")
    return trim_poly(arr)


def trim_poly(c, rtol=0.0):
    """Drop trailing (high-order) coefficients at or below rtol * max|c|.

    The default keeps every nonzero coefficient: physical polynomials in
    s (rad/s) legitimately span many decades across their degrees, so a
    magnitude-relative trim would silently change the function. Callers
    that know their coefficient scale is uniform may pass an rtol.
    """
    c = np.asarray(c, dtype=complex)
    scale = np.max(np.abs(c))
    if scale == 0.0:
        return np.zeros(1, dtype=complex)
    keep = c.size
    while keep > 1 and abs(c[keep - 1]) <= rtol * scale:
        keep -= 1
    return c[:keep].copy()


def poly_eval(c, s):
    """Horner evaluation of ascending coefficients at scalar or array s."""
    s = np.asarray(s, dtype=complex)
    out = np.full(s.shape, c[-1], dtype=complex)
    for k in range(len(c) - 2, -1, -1):
        out = out * s + c[k]
    return out if out.shape else complex(out)


def poly_mul(a, b):
    return np.convolve(a, b)


def poly_add(a, b):
    n = max(len(a), len(b))
    out = np.zeros(n, dtype=complex)
    out[: len(a)] += a
    out[: len(b)] += b
    return out


def poly_shift(c, delta):
    """Coefficients of p(s + delta) by binomial expansion, degree preserved."""
    n = len(c)
    out = np.zeros(n, dtype=complex)
    dpow = np.ones(n, dtype=complex)
    for m in range(1, n):
        dpow[m] = dpow[m - 1] * delta
    for k in range(n):
        ck = c[k]
        if ck == 0.0:
            continue
        for j in range(k + 1):
            out[j] += ck * math.comb(k, j) * dpow[k - j]
    return out


def poly_conj(c):
    """Coefficients of the conjugate-coefficient polynomial."""
    return np.conj(c)


class RationalFunction:
    """num(s)/den(s) with complex coefficients in ascending powers.

    The denominator is normalized monic on construction. Supports the
    usual field operations plus evaluation, real/conjugate queries, and
    frequency translation. Degrees above DEGREE_CAP raise DegreeCapError
    rather than silently producing ill-conditioned polynomials.
    """

    __slots__ = ("num", "den")

    def __init__(self, num, den=(1.0,)):
        num = _as_poly(num)
        den = _as_poly(den)
        if np.all(den == 0.0):
            raise ZeroDivisionError("rational function with zero denominator")
        lead = den[-1]
        self.num = num / lead
        self.den = den / lead
        if self.degree > DEGREE_CAP:
            raise DegreeCapError(
                f"rational function degree {self.degree} exceeds cap {DEGREE_CAP}"
            )

    # ---- basic queries -------------------------------------------------

    @property
    def num_degree(self):
        return len(self.num) - 1

    @property
    def den_degree(self):
        return len(self.den) - 1

    @property
    def degree(self):
        return max(self.num_degree, self.den_degree)

    @property
    def is_proper(self):
        return self.num_degree <= self.den_degree

    def is_real(self, tol=1e-9):
        """True when all coefficients are real to within tol (relative)."""
        scale = max(np.max(np.abs(self.num)), np.max(np.abs(self.den)), 1e-300)
        return (
            np.max(np.abs(self.num.imag)) <= tol * scale
            and np.max(np.abs(self.den.imag)) <= tol * scale
        )

    def is_zero(self):
        return np.all(self.num == 0.0)

    # ---- evaluation ----------------------------------------------------

    def __call__(self, s):
        d = poly_eval(self.den, s)
        bad = np.abs(np.asarray(d)) < 1e-300
        if np.any(bad):
            raise NumericalError("rational function evaluated at a pole")
        return poly_eval(self.num, s) / d

    # ---- algebra -------------------------------------------------------

    @staticmethod
    def _coerce(other):
        if isinstance(other, RationalFunction):
            return other
        if isinstance(other, (int, float, complex, np.number)):
            return RationalFunction([complex(other)])
        return NotImplemented

    def __add__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return NotImplemented
        # common denominator detected exactly: keeps degrees from inflating
        # in chained algebra (both operands are monic, so bitwise equality
        # is meaningful)
        if np.array_equal(self.den, other.den):
            return RationalFunction(poly_add(self.num, other.num), self.den)
        num = poly_add(poly_mul(self.num, other.den), poly_mul(other.num, self.den))
        return RationalFunction(num, poly_mul(self.den, other.den))

    __radd__ = __add__

    def __neg__(self):
        return RationalFunction(-self.num, self.den)

    def __sub__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return NotImplemented
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return NotImplemented
        return RationalFunction(
            poly_mul(self.num, other.num), poly_mul(self.den, other.den)
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return NotImplemented
        if other.is_zero():
            raise ZeroDivisionError("division by the zero rational function")
        return RationalFunction(
            poly_mul(self.num, other.den), poly_mul(self.den, other.num)
        )

    def __rtruediv__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return NotImplemented
        return other / self

    def conj_coefficients(self):
        """Mirror with conjugated coefficients; equals conj(F(conj(s)))."""
        return RationalFunction(poly_conj(self.num), poly_conj(self.den))

    def __repr__(self):
        return f"RationalFunction(num={self.num!r}, den={self.den!r})"


def rf(num, den=(1.0,)):
    """Shorthand constructor."""
    return RationalFunction(num, den)


S = RationalFunction([0.0, 1.0])


def feedback(forward, loop):
    """Closed loop forward/(1 + forward*loop) with a well-posedness check."""
    if not isinstance(forward, RationalFunction):
        forward = RationalFunction([complex(forward)])
    one_plus = 1.0 + forward * loop
    if np.max(np.abs(one_plus.num)) <= 1e-14 * max(np.max(np.abs(one_plus.den)), 1.0):
        raise NumericalError("feedback interconnection is singular (1 + GH == 0)")
    return forward / one_plus


def translate_frequency(func, delta):
    """Substitute s -> s + delta, the rotating-frame shift of a transfer function.

    delta is typically +/- j*omega1. Degree is preserved exactly; the
    result generally has complex coefficients even for a real input.
    """
    return RationalFunction(
        poly_shift(func.num, delta), poly_shift(func.den, delta)
    )


def polynomial_roots(coeffs):
    """All roots of a polynomial given ascending coefficients.

    Builds the monic companion matrix and takes LAPACK eigenvalues
    (balancing plus shifted QR). Each root must satisfy a backward-error
    residual below 1e-8, otherwise RootfindingError is raised.
    """
    c = _as_poly(coeffs)
    if len(c) == 1:
        raise ValueError("root finding needs degree >= 1")
    if np.all(c == 0.0):
        raise ValueError("zero polynomial has no defined roots")
    n = len(c) - 1
    monic = c / c[-1]
    comp = np.zeros((n, n), dtype=complex)
    if n > 1:
        comp[1:, :-1] = np.eye(n - 1)
    comp[:, -1] = -monic[:-1]
    try:
        roots = np.linalg.eigvals(comp)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure
        raise RootfindingError(f"companion eigenvalue iteration failed: {exc}")
    # Backward error per root: |p(r)| relative to sum |c_k| |r|^k.
    for r in roots:
        val = abs(poly_eval(c, r))
        scale = float(np.sum(np.abs(c) * np.abs(r) ** np.arange(len(c))))
        if val > 1e-8 * max(scale, 1e-300):
            raise RootfindingError(
                f"root {r!r} has backward error {val / scale:.3e} above 1e-8"
            )
    return roots
