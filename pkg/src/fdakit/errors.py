"""Exception types shared across the toolkit."""


class DimensionError(ValueError):
    """Shape or size of an input is unusable (empty plane, mismatched images, ...)."""


class ParameterError(ValueError):
    """A parameter is out of range or an argument combination is invalid."""


class FormatError(ValueError):
    """A file violates its on-disk format; the message names the offending field."""


class DataError(ValueError):
    """Data values are invalid (non-finite samples, out-of-range labels, ...)."""


class MemoryBudgetError(RuntimeError):
    """The streaming memory budget cannot accommodate the configured work."""
