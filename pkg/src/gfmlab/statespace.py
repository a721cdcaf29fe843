"""State-space realization and interconnection of transfer-function blocks.

Blocks with complex coefficients act on 2-vector signals through the
standard real embedding of complex multiplication, so a block diagram
mixing scalar channels (power, angle) and vector channels (voltage and
current pairs) assembles into one real LTI system. Algebraic loops are
solved exactly during assembly and flagged when singular.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import IllPosedLoopError
from .ratfun import RationalFunction, poly_add

EIGEN_SIZE_CAP = 64


def _canonical_complex(func):
    """Controllable canonical form of a proper rational function.

    Returns complex (A, B, C, D) with n = denominator degree states.
    """
    if not func.is_proper:
        raise ValueError("only proper blocks can be realized")
    den = func.den  # monic by construction
    n = len(den) - 1
    if func.num_degree == n and n > 0:
        d = func.num[n]
        num_sp = poly_add(func.num, -d * den)[:n]
    elif n == 0:
        return (
            np.zeros((0, 0), dtype=complex),
            np.zeros((0, 1), dtype=complex),
            np.zeros((1, 0), dtype=complex),
            np.array([[func.num[0]]], dtype=complex),
        )
    else:
        d = 0.0
        num_sp = func.num
    A = np.zeros((n, n), dtype=complex)
    if n > 1:
        A[:-1, 1:] = np.eye(n - 1)
    A[-1, :] = -den[:n]
    B = np.zeros((n, 1), dtype=complex)
    B[-1, 0] = 1.0
    C = np.zeros((1, n), dtype=complex)
    C[0, : len(num_sp)] = num_sp
    D = np.array([[d]], dtype=complex)
    return A, B, C, D


def _embed(m):
    """Real embedding of a complex matrix: z acts as [[re,-im],[im,re]]."""
    return np.block([[m.real, -m.imag], [m.imag, m.real]])


def realize_block(func, dim):
    """Real (A, B, C, D) for one block driving a dim-1 or dim-2 signal."""
    A, B, C, D = _canonical_complex(func)
    if dim == 1:
        if not func.is_real(1e-12):
            raise ValueError("complex-coefficient block on a scalar signal")
        return A.real, B.real, C.real, D.real
    if dim == 2:
        return _embed(A), _embed(B), _embed(C), _embed(D)
    raise ValueError(f"unsupported signal dimension {dim}")


def _coeff_matrix(coeff, dim_out, dim_in):
    """Normalize a wiring coefficient to a real (dim_out x dim_in) matrix."""
    if isinstance(coeff, np.ndarray) and coeff.ndim == 2:
        if coeff.shape != (dim_out, dim_in):
            raise ValueError(
                f"gain shape {coeff.shape} does not match ({dim_out},{dim_in})"
            )
        return coeff.astype(float)
    z = complex(coeff)
    if z.imag == 0.0:
        if dim_out != dim_in:
            raise ValueError("scalar gain between signals of different dimension")
        return z.real * np.eye(dim_out)
    if dim_out == dim_in == 2:
        return np.array([[z.real, -z.imag], [z.imag, z.real]])
    raise ValueError("complex gain requires 2-dimensional signals")


class BlockDiagram:
    """Named-signal interconnection of transfer-function and gain nodes.

    Every signal has a fixed dimension (1 for scalars, 2 for complex
    pairs) and is either an external input or the output of exactly one
    node. Node inputs are linear combinations of signals. `realize`
    eliminates the algebraic variables and returns one real state space.
    """

    def __init__(self):
        self._dims = {}
        self._inputs = []
        self._nodes = {}  # out -> (kind, payload, terms)

    def _declare(self, name, dim):
        if name in self._dims:
            raise ValueError(f"signal {name!r} defined twice")
        if dim not in (1, 2):
            raise ValueError("signal dimension must be 1 or 2")
        self._dims[name] = dim

    def add_input(self, name, dim=1):
        self._declare(name, dim)
        self._inputs.append(name)

    def _infer_dim(self, terms):
        first = next(iter(terms))
        if first not in self._dims:
            raise ValueError(f"cannot infer dimension from unknown signal {first!r}")
        return self._dims[first]

    def add_gain(self, out, terms, dim=None):
        """Static node: out = sum of gain * signal over terms."""
        if dim is None:
            dim = self._infer_dim(terms)
        self._declare(out, dim)
        self._nodes[out] = ("gain", None, dict(terms))

    def add_tf(self, out, func, terms, dim=None):
        """Dynamic node: out = func applied to the sum of terms."""
        if dim is None:
            dim = self._infer_dim(terms)
        self._declare(out, dim)
        if not isinstance(func, RationalFunction):
            raise TypeError("add_tf expects a RationalFunction")
        self._nodes[out] = ("tf", func, dict(terms))

    def signal_dim(self, name):
        return self._dims[name]

    def realize(self, outputs, inputs=None):
        """Assemble into a RealStateSpace with the requested port order."""
        if inputs is None:
            inputs = list(self._inputs)
        for name in inputs:
            if name not in self._inputs:
                raise ValueError(f"{name!r} is not an input signal")
        internal = [s for s in self._dims if s not in self._inputs]
        for out, (_, _, terms) in self._nodes.items():
            for sig in terms:
                if sig not in self._dims:
                    raise ValueError(f"node {out!r} references unknown signal {sig!r}")
        for sig in internal:
            if sig not in self._nodes:
                raise ValueError(f"internal signal {sig!r} has no defining node")

        def spans(names):
            offs, total = {}, 0
            for s in names:
                offs[s] = (total, total + self._dims[s])
                total += self._dims[s]
            return offs, total

        v_off, nv = spans(internal)
        w_off, nw = spans(inputs)

        # Realize dynamic nodes and lay out the state vector.
        mats, x_off, nx = {}, {}, 0
        for out, (kind, func, _) in self._nodes.items():
            if kind != "tf":
                continue
            dim = self._dims[out]
            A, B, C, D = realize_block(func, dim)
            mats[out] = (A, B, C, D)
            x_off[out] = (nx, nx + A.shape[0])
            nx += A.shape[0]

        # v = Ex x + Ev v + Ew w, with u_k the summed node inputs.
        Ex = np.zeros((nv, nx))
        Ev = np.zeros((nv, nv))
        Ew = np.zeros((nv, nw))
        # Node input selectors for the state equations.
        Tv = {}
        Tw = {}
        for out, (kind, func, terms) in self._nodes.items():
            r0, r1 = v_off[out]
            dim_out = self._dims[out]
            if kind == "tf":
                A, B, C, D = mats[out]
                tv = np.zeros((dim_out, nv))
                tw = np.zeros((dim_out, nw))
                for sig, coeff in terms.items():
                    m = _coeff_matrix(coeff, dim_out, self._dims[sig])
                    if sig in v_off:
                        c0, c1 = v_off[sig]
                        tv[:, c0:c1] += m
                    else:
                        c0, c1 = w_off[sig]
                        tw[:, c0:c1] += m
                Tv[out], Tw[out] = tv, tw
                s0, s1 = x_off[out]
                Ex[r0:r1, s0:s1] = C
                Ev[r0:r1, :] += D @ tv
                Ew[r0:r1, :] += D @ tw
            else:
                for sig, coeff in terms.items():
                    m = _coeff_matrix(coeff, dim_out, self._dims[sig])
                    if sig in v_off:
                        c0, c1 = v_off[sig]
                        Ev[r0:r1, c0:c1] += m
                    else:
                        c0, c1 = w_off[sig]
                        Ew[r0:r1, c0:c1] += m

        M = np.eye(nv) - Ev
        if nv:
            cond = np.linalg.cond(M)
            if not np.isfinite(cond) or cond > 1e12:
                raise IllPosedLoopError(
                    "algebraic loop is singular or near singular during assembly"
                )
            Vx = np.linalg.solve(M, Ex)
            Vw = np.linalg.solve(M, Ew)
        else:
            Vx = np.zeros((0, nx))
            Vw = np.zeros((0, nw))

        A = np.zeros((nx, nx))
        B = np.zeros((nx, nw))
        for out, (kind, _, _) in self._nodes.items():
            if kind != "tf":
                continue
            Ab, Bb, _, _ = mats[out]
            s0, s1 = x_off[out]
            A[s0:s1, s0:s1] = Ab
            u_x = Tv[out] @ Vx
            u_w = Tv[out] @ Vw + Tw[out]
            A[s0:s1, :] += Bb @ u_x
            B[s0:s1, :] += Bb @ u_w

        rows_c, rows_d = [], []
        for name in outputs:
            if name in v_off:
                r0, r1 = v_off[name]
                rows_c.append(Vx[r0:r1, :])
                rows_d.append(Vw[r0:r1, :])
            elif name in w_off:
                c0, c1 = w_off[name]
                sel = np.zeros((self._dims[name], nw))
                sel[:, c0:c1] = np.eye(self._dims[name])
                rows_c.append(np.zeros((self._dims[name], nx)))
                rows_d.append(sel)
            else:
                raise ValueError(f"unknown output signal {name!r}")
        C = np.vstack(rows_c) if rows_c else np.zeros((0, nx))
        D = np.vstack(rows_d) if rows_d else np.zeros((0, nw))
        return RealStateSpace(A, B, C, D)


@dataclass
class RealStateSpace:
    """Real matrices (A, B, C, D) of an assembled LTI model."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        self.D = np.atleast_2d(np.asarray(self.D, dtype=float))

    @property
    def n_states(self):
        return self.A.shape[0]

    @property
    def n_inputs(self):
        return self.B.shape[1]

    @property
    def n_outputs(self):
        return self.C.shape[0]

    def freq_response(self, omega):
        """Complex response with shape (len(omega), n_out, n_in)."""
        omega = np.atleast_1d(np.asarray(omega, dtype=float))
        out = np.empty((omega.size, self.n_outputs, self.n_inputs), dtype=complex)
        eye = np.eye(self.n_states)
        for k, w in enumerate(omega):
            x = np.linalg.solve(1j * w * eye - self.A, self.B)
            out[k] = self.C @ x + self.D
        return out

    def poles(self):
        return eigenvalues(self.A)


def eigenvalues(a):
    """Eigenvalues of a square real or complex matrix, size capped at 64.

    Sorted by descending real part (ties by descending imaginary part)
    so repeated calls give a stable ordering.
    """
    a = np.asarray(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("eigenvalues expects a square matrix")
    if a.shape[0] > EIGEN_SIZE_CAP:
        raise ValueError(
            f"matrix size {a.shape[0]} exceeds supported cap {EIGEN_SIZE_CAP}"
        )
    vals = np.linalg.eigvals(a)
    order = np.lexsort((-vals.imag, -vals.real))
    return vals[order]


@dataclass
class ResponseTable:
    """Frequency samples of one complex-valued response.

    omega is in rad/s, strictly increasing and positive; values holds
    the complex response at each point.
    """

    omega: np.ndarray
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=float)
        self.values = np.asarray(self.values, dtype=complex)
        if self.omega.ndim != 1 or self.omega.shape != self.values.shape:
            raise ValueError("omega and values must be 1-d arrays of equal length")
        if np.any(self.omega <= 0.0) or np.any(np.diff(self.omega) <= 0.0):
            raise ValueError("omega must be positive and strictly increasing")

    def __len__(self):
        return self.omega.size
