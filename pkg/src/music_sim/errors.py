"""Exception types shared across the simulator."""


class SimulationError(Exception):
    """Base class for all simulator errors."""


# ---------------- scenario / topology ---------------- #

class ScenarioParseError(SimulationError):
    """Scenario document is not valid JSON; carries line/column when known."""

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        if line is not None:
            message = f"{message} (line {line}, column {column})"
        super().__init__(message)


class ScenarioSchemaError(SimulationError):
    """Scenario parsed but violates the documented schema (unknown/missing keys, bad types)."""


class UnknownNodeReference(SimulationError):
    """A node id referenced somewhere does not exist in the node inventory."""


class CycleInHierarchy(SimulationError):
    """Parent links do not form a strict one-tier-up hierarchy."""


class D2dDepthExceeded(SimulationError):
    """A device group slave acts as a master elsewhere (multi-hop chain)."""


class CrossApD2dGroup(SimulationError):
    """Members of a device group attach to different access points."""


# ---------------- radio ---------------- #

class NonPositiveBandwidth(SimulationError):
    pass


class NegativePower(SimulationError):
    pass


class MissingGain(SimulationError):
    """A cluster member has no channel gain entry."""


class ZeroRate(SimulationError):
    pass


# ---------------- model math ---------------- #

class EmptyWidths(SimulationError):
    """A model needs at least an input and an output width."""


class ShapeMismatch(SimulationError):
    pass


class StaleCache(SimulationError):
    """A backward pass was given a cache from a different model or segment."""


class EmptyInput(SimulationError):
    pass


class LengthMismatch(SimulationError):
    pass


# ---------------- engine ---------------- #

class TimestampInPast(SimulationError):
    """An event was scheduled before the current virtual clock."""


# ---------------- protocol execution ---------------- #

class SessionAborted(SimulationError):
    """A training session could not continue; carries the partial trace."""

    def __init__(self, reason, trace=None):
        self.reason = reason
        self.trace = trace
        super().__init__(reason)


class AllClientsDropped(SessionAborted):
    """Every client of a round dropped out; nothing left to aggregate."""


class ClientDropout(SimulationError):
    """A client failed mid-protocol (battery or transmission); retriable."""


class MissingD2dLink(SimulationError):
    """Direct relaying requested between devices that share no single-hop link."""


class NestedServerMismatch(SimulationError):
    """A nested sub-session is not anchored on the aggregating client itself."""


# ---------------- placement ---------------- #

class EmptyPool(SimulationError):
    """No candidate device survived the selection thresholds."""


class NoFeasiblePlan(SimulationError):
    """Every candidate plan violates the deadline or a structural constraint."""


# ---------------- cli ---------------- #

class UnsweepableParameter(SimulationError):
    """The requested sweep axis is not a known sweepable scalar or has no values."""
