"""Exception hierarchy shared across the toolkit."""


class RoundfitError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(RoundfitError):
    """Operand shapes are incompatible for the requested operation."""


class TapeError(RoundfitError):
    """Autodiff tape used in an invalid state (e.g. backward twice)."""


class StateError(RoundfitError):
    """Pipeline invoked out of order (e.g. missing prior quantized blocks)."""


class NumericsError(RoundfitError):
    """Numerical failure during tuning (NaN loss, bound violation)."""


class DataError(RoundfitError):
    """Input data violates a contract (bad token ids, too few tokens)."""


class FormatError(RoundfitError):
    """A serialized container is corrupt or inconsistent."""


class PackError(RoundfitError):
    """Integer codes out of range for the requested bit width."""
