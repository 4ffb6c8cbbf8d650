"""Exception types shared across the simulator."""


class SimulationError(Exception):
    """Base class for all simulator errors."""


class ConstructionError(SimulationError):
    """A city spec violates a structural invariant (connectivity, bad ids, ...)."""


class NoPathError(SimulationError):
    """No route exists between two nodes under the given exclusions."""


class ProtocolError(SimulationError):
    """An agent protocol was violated (e.g. leave without matching enter).

    Indicates a simulation bug; the run must abort.
    """


class SchedulingError(SimulationError):
    """An event was scheduled in the past."""


class CommandError(SimulationError):
    """A command is malformed or cannot legally apply."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class TargetError(SimulationError):
    """A command references a taxi/request/station that does not exist."""


class StaleReplyError(SimulationError):
    """A negotiation reply arrived after the prompt was already resolved."""


class StrandedError(SimulationError):
    """A taxi's battery would drop below zero."""


class InventoryError(SimulationError):
    """A rental was started at a site with no cars available."""


class ConfigError(SimulationError):
    """A scenario configuration is invalid."""


class LogError(SimulationError):
    """An event log is internally inconsistent (unbalanced transitions)."""


class PairingError(SimulationError):
    """Two result sets cannot be paired (mismatched seeds or sweep grid)."""


class SpecError(SimulationError):
    """A trend expectation references data the result table does not carry."""


class CalibrationError(SimulationError):
    """Calibration found no parameter cell meeting all target windows."""

    def __init__(self, message, nearest=None):
        super().__init__(message)
        self.nearest = nearest
