"""Exception hierarchy shared across the package."""


class HetmetaError(Exception):
    """Base class for all errors raised by this package."""


class InvalidShapeError(HetmetaError):
    """Operands have incompatible or unexpected shapes."""


class InvalidValueError(HetmetaError):
    """An input or a computed result contains invalid (e.g. non-finite) values."""


class InvalidConfigError(HetmetaError):
    """A configuration object or document failed validation."""


class InvalidEpisodeError(HetmetaError):
    """An episode violates its structural invariants."""


class IngestionError(HetmetaError):
    """A tabular file could not be turned into a task dataset."""


class TaskNotSampleableError(HetmetaError):
    """The requested episode cannot be drawn from this task; callers resample."""


class NumericalFailureError(HetmetaError):
    """A numerical routine failed beyond its recovery budget."""


class TapeUsageError(HetmetaError):
    """The differentiation tape was used outside its contract."""
