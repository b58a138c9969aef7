"""Exception hierarchy shared by all stages."""


class SimulationError(Exception):
    """Base class for every error raised by the package."""


class ConfigError(SimulationError):
    """Invalid configuration; ``key`` holds the dotted path of the offending key."""

    def __init__(self, message, key=None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class ParseError(SimulationError):
    pass


class NotWatertight(SimulationError):
    pass


class InvertedOrientation(SimulationError):
    pass


class DisconnectedDomain(SimulationError):
    pass


class ResolutionTooCoarse(SimulationError):
    pass


class EmptySac(SimulationError):
    pass


class DegenerateEdge(SimulationError):
    pass


class Instability(SimulationError):
    """A state blew up (non-finite values or a velocity guard tripped)."""


class StallDetected(SimulationError):
    pass


class CoilOutsideGrid(SimulationError):
    pass


class PressureSolveDiverged(SimulationError):
    pass


class CflViolated(SimulationError):
    pass


class DegenerateSetup(SimulationError):
    pass


class DimMismatch(SimulationError):
    pass


class ZeroMass(SimulationError):
    pass


class PreconditionError(SimulationError, ValueError):
    pass
