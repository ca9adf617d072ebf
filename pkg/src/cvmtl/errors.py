"""Exception taxonomy shared across the package."""


class CvmtlError(Exception):
    """Base class for all library errors."""


class DimensionError(CvmtlError):
    """Operand shapes are incompatible."""


class ContractError(CvmtlError):
    """A documented precondition was violated by the caller."""


class StateError(CvmtlError):
    """Operation invalid in the object's current state (e.g. consumed tape)."""


class DomainError(CvmtlError):
    """Numeric argument outside its valid range."""


class ConfigError(CvmtlError):
    """Invalid or inconsistent configuration."""


class DataError(CvmtlError):
    """Input data violates the declared format (labels, files, manifests)."""


class TrainingError(CvmtlError):
    """Non-finite loss or other unrecoverable optimization failure."""


class CheckpointError(CvmtlError):
    """Checkpoint container is unreadable or inconsistent with the config."""
