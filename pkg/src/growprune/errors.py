"""Exception types shared across the package."""


class GrowPruneError(Exception):
    """Base class for all package errors."""


class DimensionError(GrowPruneError, ValueError):
    """Operand shapes do not compose."""


class InputError(GrowPruneError, ValueError):
    """An argument is outside its allowed domain (empty data, bad label, ...)."""


class StateError(GrowPruneError, RuntimeError):
    """An object was used in the wrong lifecycle state (e.g. a consumed cache)."""


class FormatError(GrowPruneError, ValueError):
    """A file on disk does not match the expected binary layout."""


class ChecksumError(FormatError):
    pass


class PreconditionError(GrowPruneError, RuntimeError):
    """A model failed a structural precondition, e.g. recoverability."""

    def __init__(self, message, violations=()):
        super().__init__(message)
        self.violations = list(violations)


class ConfigError(GrowPruneError, ValueError):
    """Invalid experiment configuration; ``field`` names the offending key."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
