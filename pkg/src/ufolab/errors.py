"""Exception types shared across the package."""


class UfolabError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(UfolabError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ContractError(UfolabError, ValueError):
    """An API contract was violated (bad argument, non-scalar loss, ...)."""


class FormatError(UfolabError, ValueError):
    """A serialized file is malformed.

    Parameters
    ----------
    message : str
        Human-readable description of the problem.
    offset : int or None
        Byte offset at which the problem was detected, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class FingerprintError(UfolabError, ValueError):
    """Adapter and model disagree on the set of adaptable layers."""


class NumericError(UfolabError, ArithmeticError):
    """A computation produced non-finite values (training loss went NaN, ...)."""


class ConfigError(UfolabError, ValueError):
    """A run configuration file is missing, malformed, or out of range."""
