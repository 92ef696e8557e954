"""Exception hierarchy shared across the package."""


class NllfrError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(NllfrError, ValueError):
    pass


class RankError(NllfrError, ValueError):
    """Matrix singular or rank deficient to tolerance.

    ``column`` holds the offending pivot/column index when known.
    """

    def __init__(self, message, pivot=None, column=None):
        super().__init__(message)
        self.pivot = pivot
        self.column = column


class InsufficientDataError(NllfrError, ValueError):
    pass


class ParameterDomainError(NllfrError, ValueError):
    pass


class ResonanceError(NllfrError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


class InstabilityError(NllfrError, RuntimeError):
    """Non-finite values appeared during a simulation."""

    def __init__(self, message, index=None, realization=None):
        super().__init__(message)
        self.index = index
        self.realization = realization


class DesignError(NllfrError, ValueError):
    pass


class DegenerateSignalError(NllfrError, ValueError):
    pass


class ExcitationError(NllfrError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


class InitializationError(NllfrError, ValueError):
    pass


class IllPosedError(NllfrError, ValueError):
    pass


class IdentifiabilityError(NllfrError, ValueError):
    def __init__(self, message, monomial=None):
        super().__init__(message)
        self.monomial = monomial


class TransientError(NllfrError, RuntimeError):
    pass


class OptimizationError(NllfrError, RuntimeError):
    pass


class CompatibilityError(NllfrError, ValueError):
    pass


class ConfigError(NllfrError, ValueError):
    pass


class StageError(NllfrError, RuntimeError):
    """Pipeline failure tagged with the stage that raised it."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
