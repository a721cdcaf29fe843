"""Small-signal stability workbench for grid-forming voltage-source converters.

Four layers, each checkable against the next: rational-function and
state-space numerics, the converter model with its equivalent output
impedance, the frequency-domain stability machinery (complex torque
coefficients and assembled closed-loop models), and a nonlinear averaged
time-domain simulator that measures what the other layers predict.
"""

from .closedloop import (
    SmallSignalModel,
    StepResult,
    angle_injection_model,
    assemble_model,
    closed_loop_poles,
    coupling_matrices,
    damping_ratio,
    is_stable,
    step_response,
    subsynchronous_mode,
    synchronous_mode,
)
from .converter import (
    OMEGA1_DEFAULT,
    CircuitParams,
    DelayModel,
    InnerLoopConfig,
    InnerLoopParams,
    OperatingPoint,
    OuterLoopParams,
    derive_equivalent_impedance,
    solve_operating_point,
)
from .errors import (
    ConfigError,
    ConvergenceError,
    DegreeCapError,
    GfmError,
    IllPosedLoopError,
    NumericalError,
    RootfindingError,
    SimulationBlowup,
    TransferLimitError,
)
from .ratfun import (
    RationalFunction,
    S,
    feedback,
    polynomial_roots,
    rf,
    translate_frequency,
)
from .sim import (
    Injection,
    ScanResult,
    SimScenario,
    Trace,
    TraceVerdict,
    classify_stability,
    scan_impedance,
    scan_torque,
    simulate,
)
from .statespace import BlockDiagram, RealStateSpace, ResponseTable, eigenvalues
from .torque import (
    CriticalMode,
    DqImpedance,
    StabilityVerdict,
    TorqueProfile,
    complex_torque_profile,
    default_torque_grid,
    dq_components,
    embed_dq,
    grid_impedance_dq,
    linearized_power_angle,
    net_damping_verdict,
    power_angle_with_avc,
    steady_state_power,
)

__version__ = "0.1.0"

__all__ = [
    "OMEGA1_DEFAULT",
    "BlockDiagram",
    "CircuitParams",
    "ConfigError",
    "ConvergenceError",
    "CriticalMode",
    "DegreeCapError",
    "DelayModel",
    "DqImpedance",
    "GfmError",
    "IllPosedLoopError",
    "Injection",
    "InnerLoopConfig",
    "InnerLoopParams",
    "NumericalError",
    "OperatingPoint",
    "OuterLoopParams",
    "RationalFunction",
    "RealStateSpace",
    "ResponseTable",
    "RootfindingError",
    "S",
    "ScanResult",
    "SimScenario",
    "SimulationBlowup",
    "SmallSignalModel",
    "StabilityVerdict",
    "StepResult",
    "Trace",
    "TraceVerdict",
    "TorqueProfile",
    "TransferLimitError",
    "angle_injection_model",
    "assemble_model",
    "classify_stability",
    "closed_loop_poles",
    "complex_torque_profile",
    "coupling_matrices",
    "damping_ratio",
    "default_torque_grid",
    "derive_equivalent_impedance",
    "dq_components",
    "embed_dq",
    "feedback",
    "grid_impedance_dq",
    "is_stable",
    "linearized_power_angle",
    "net_damping_verdict",
    "polynomial_roots",
    "power_angle_with_avc",
    "rf",
    "scan_impedance",
    "scan_torque",
    "simulate",
    "solve_operating_point",
    "steady_state_power",
    "step_response",
    "subsynchronous_mode",
    "synchronous_mode",
    "translate_frequency",
]
