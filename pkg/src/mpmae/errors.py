"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class MPMAEError(Exception):
    exit_code = 1


class ConfigError(MPMAEError, ValueError):
    """Bad configuration: unknown keys, missing stats, incompatible shapes."""

    exit_code = 2


class InvalidArgument(ConfigError):
    pass


class SchemaCorruption(ConfigError):
    pass


class DataError(MPMAEError):
    exit_code = 3


class CorruptDataset(DataError):
    pass


class UnsupportedVersion(DataError):
    pass


class IntegrityError(DataError):
    """Checkpoint checksum or structure mismatch."""


class ShapeMismatch(ConfigError):
    pass


class NumericError(MPMAEError, FloatingPointError):
    exit_code = 4


class InvalidState(MPMAEError, RuntimeError):
    pass


class InvariantViolation(MPMAEError, AssertionError):
    exit_code = 4
