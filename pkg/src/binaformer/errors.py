"""Exception types shared across the package."""


class BinaformerError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(BinaformerError):
    """Shapes or sizes are incompatible for the requested operation."""


class EmptyInputError(DimensionError):
    """An operation received an empty sequence where at least one element is required."""


class SequenceTooShortError(DimensionError):
    """A time axis is shorter than the minimum the operation supports."""


class NumericError(BinaformerError):
    """Non-finite values where finite ones are required."""


class InvalidStateError(BinaformerError):
    """A learnable state violates its invariants (e.g. non-positive scale)."""


class ConfigError(BinaformerError):
    """A configuration value or file is invalid."""


class ProfilingError(BinaformerError):
    """The cost model met a layer it does not know how to account for."""
