"""Exception types shared across the package."""


class BridgeTAError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(BridgeTAError, ValueError):
    """An operand was rejected because of its shape or value."""


class DomainError(BridgeTAError, ValueError):
    """A value fell outside the numeric domain of an operation."""


class ContractError(BridgeTAError, RuntimeError):
    """A caller violated a documented precondition."""


class FormatError(BridgeTAError, ValueError):
    """A file on disk does not follow its binary or JSON layout."""


class CorruptionError(BridgeTAError, ValueError):
    """File contents do not match their recorded hash."""


class PreconditionError(BridgeTAError, FileNotFoundError):
    """A required input (checkpoint, dataset) is missing."""
