"""Exception hierarchy shared by every module of the package."""


class EvPinoError(Exception):
    """Base class for all package errors."""


class ShapeError(EvPinoError, ValueError):
    pass


class InvalidLengthError(EvPinoError, ValueError):
    pass


class ContractError(EvPinoError, RuntimeError):
    """Raised when an API is used outside its documented contract."""


class ConfigError(EvPinoError, ValueError):
    pass


class DomainError(EvPinoError, ValueError):
    """Raised for physically meaningless inputs (negative speed, zero efficiency)."""


class LengthError(EvPinoError, ValueError):
    pass


class ParseError(EvPinoError, ValueError):
    pass


class CheckpointVersionError(EvPinoError, ValueError):
    pass


class DivergenceError(EvPinoError, RuntimeError):
    pass
