"""Exception hierarchy shared by every drrl module."""


class DRRLError(Exception):
    """Base class for all package errors."""


class InvalidMatrix(DRRLError, ValueError):
    pass


class DecompositionFailure(DRRLError, ArithmeticError):
    pass


class RankOutOfBounds(DRRLError, ValueError):
    pass


class InvalidNorm(DRRLError, ValueError):
    pass


class DegenerateSpectrum(DRRLError, ValueError):
    pass


class InvalidInput(DRRLError, ValueError):
    pass


class DegenerateInput(DRRLError, ValueError):
    pass


class InvalidSpec(DRRLError, ValueError):
    pass


class SafetyViolation(DRRLError, RuntimeError):
    """A masked action was handed to the environment."""


class SafetyDeadlock(DRRLError, RuntimeError):
    """Every action is masked; sampling is impossible."""


class InvalidParams(DRRLError, ValueError):
    pass


class TrainingDiverged(DRRLError, RuntimeError):
    """Raised on a non-finite loss. ``last_good`` holds the parameters before the bad step."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class MissingArtifact(DRRLError, FileNotFoundError):
    pass
