"""Exception hierarchy shared across the workbench.

Two broad families matter to callers: configuration problems (bad user
input, caught before any numerics run) and numerical failures (an
algorithm that started but could not finish to tolerance). The CLI maps
them to distinct exit codes.
"""


class GfmError(Exception):
    """Base class for everything raised deliberately by gfmlab."""


class ConfigError(GfmError):
    """Invalid configuration or scenario input."""


class NumericalError(GfmError):
    """A numerical routine failed to reach its documented tolerance."""


class DegreeCapError(NumericalError):
    """Rational-function degree grew past the supported cap."""


class RootfindingError(NumericalError):
    """Polynomial root extraction did not meet the residual bound."""


class IllPosedLoopError(NumericalError):
    """An interconnection contains a singular algebraic loop."""


class ConvergenceError(NumericalError):
    """Iterative solve (Newton, bisection) failed to converge."""


class TransferLimitError(ConvergenceError):
    """Requested power transfer exceeds the static capability."""


class SimulationBlowup(NumericalError):
    """Time-domain state left the trusted region (> 100 pu)."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace
