"""Exception hierarchy for the simulator.

Every error carries an ``exit_code`` so the CLI can map failures to its
stable exit statuses without string matching.
"""


class SimError(Exception):
    """Base class for all simulator errors."""

    exit_code = 1


# -------- core-model --------
class GraphError(SimError):
    exit_code = 3


class DuplicateIdError(GraphError):
    pass


class UnknownDataRefError(GraphError):
    pass


class CycleDetectedError(GraphError):
    pass


class UnknownTaskError(GraphError):
    pass


class AlreadyDoneError(GraphError):
    pass


class UnknownTemplateError(GraphError):
    pass


class TemplateClosedError(GraphError):
    pass


class InvalidTransitionError(GraphError):
    pass


class InvalidProducerError(GraphError):
    pass


class GroupNotChainError(GraphError):
    pass


# -------- sim-kernel --------
class TimeTravelError(SimError):
    exit_code = 4


class InvalidParametersError(SimError, ValueError):
    """Raised for bad distribution or policy parameters (also a ValueError for pydantic)."""

    exit_code = 3


# -------- platform / provisioner --------
class ObjectLargerThanCacheError(SimError):
    exit_code = 4


class LocalStorageFullError(SimError):
    exit_code = 4


class RequestExceedsMachineError(SimError):
    exit_code = 3


# -------- dispatch / datamgr --------
class DestinationBusyError(SimError):
    exit_code = 4


class MigrationError(SimError):
    exit_code = 4


class UnknownDataError(SimError):
    exit_code = 4


# -------- resilience --------
class UnknownScopeError(SimError):
    exit_code = 3


class CorruptCheckpointError(SimError):
    exit_code = 3


# -------- metrics --------
class MalformedTraceError(SimError):
    exit_code = 4


# -------- cli / config --------
class ConfigParseError(SimError):
    exit_code = 2


class WorkloadFormatError(ConfigParseError):
    pass


class ConfigValidationError(SimError):
    exit_code = 3


class IncompatibleWorkloadsError(ConfigValidationError):
    pass


class SimulationInvariantError(SimError):
    """A run broke one of the simulator's invariants; ``invariant`` names it."""

    exit_code = 4

    def __init__(self, invariant: str, detail: str = ""):
        self.invariant = invariant
        super().__init__(f"invariant violated: {invariant}" + (f" ({detail})" if detail else ""))
