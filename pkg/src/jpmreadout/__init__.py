"""Simulation of superconducting qubit readout with a Josephson photomultiplier.

Modules
-------
hilbert
    Truncated Fock space, qubit and three-level JPM operators and states.
model
    Parameters, pulse schedule, Hamiltonians and Lindblad channels.
evolve
    Fixed-step RK4 (and adaptive) integrators for the master and Schrodinger equations.
protocol
    Drive, measurement and reset stages; repeated readout; detection traces.
analysis
    Contrast, detection model, reset error, Choi matrices and lifetimes.
cli
    ``sim`` command line: YAML experiments, sweeps, oracle suite.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConfigError,
    ConvergenceError,
    DegenerateBranchError,
    DimensionMismatch,
    JPMReadoutError,
    NumericalError,
    StepSizeError,
    TruncationError,
    ZeroNormError,
)
from .hilbert import HilbertLayout, Operator, QuantumState, coherent_state, displacement, embed  # noqa: E402
from .model import PulseSchedule, SystemParams, build_dissipators, hamiltonian  # noqa: E402
from .evolve import IntegratorConfig, Trajectory, evolve_lindblad, evolve_schrodinger  # noqa: E402
from .protocol import (  # noqa: E402
    ReadoutChannel,
    RunRecord,
    run_drive_stage,
    run_full_protocol,
    run_measurement_stage,
    run_repeated_protocol,
    run_reset_stage,
)
from .analysis import ChoiMatrix, contrast, process_fidelity, reset_error  # noqa: E402
