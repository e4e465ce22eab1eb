"""Exception hierarchy shared by all modules."""


class OdtlError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(OdtlError, ValueError):
    """Tensor or parameter dimensions do not line up."""


class DomainError(OdtlError, ValueError):
    """An argument lies outside the set of values an operation accepts."""


class TrainingError(OdtlError, RuntimeError):
    """Offline training could not continue (e.g. the loss became non-finite)."""


class ParseError(OdtlError, ValueError):
    """A model or dataset file could not be decoded."""


class BadMagicError(ParseError):
    pass


class VersionError(ParseError):
    pass


class TruncatedError(ParseError):
    pass


class ChecksumError(ParseError):
    pass


class FormatValidationError(ParseError):
    """Header fields are inconsistent with each other or with the payload."""
