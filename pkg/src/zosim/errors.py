"""Exception hierarchy shared by all zosim modules.

CLI exit codes map onto this hierarchy: ConfigurationError -> 2,
NumericError -> 3, FabricFault -> 4, anything else -> 1.
"""


class ZosimError(Exception):
    """Base class for all zosim errors."""


class ConfigurationError(ZosimError):
    """Invalid configuration: bad dimensions, mesh/strategy mismatch, missing files."""

    exit_code = 2


class DimensionError(ConfigurationError):
    """Tensor/activation shape does not match what an operation expects."""


class MemoryCapacityError(ConfigurationError):
    """Simulated memory pool capacity exceeded."""

    def __init__(self, message, block_id=None):
        super().__init__(message)
        self.block_id = block_id


class NumericError(ZosimError):
    """Non-finite values or invalid numeric arguments (e.g. epsilon = 0)."""

    exit_code = 3


class FabricFault(ZosimError):
    """Worker fabric failure: unreachable rank, collective timeout."""

    exit_code = 4


class ConsistencyError(FabricFault):
    """Replicated parameters diverged across ranks where they must be identical."""


class ProtocolError(ZosimError):
    """State-machine misuse: missing deferred-update state, double flush,
    offload before compute, layout change mid-run."""

    exit_code = 1


class SimulationError(ZosimError):
    """Discrete-event simulation cannot make progress (dependency cycle)."""

    exit_code = 1
