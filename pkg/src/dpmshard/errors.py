"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class DpmError(Exception):
    exit_code = 1


class UsageError(DpmError, ValueError):
    """Bad arguments or violated preconditions."""

    exit_code = 2


class ConfigError(UsageError):
    exit_code = 2


class IntegrityError(DpmError, RuntimeError):
    """Internal state or a stored artifact is inconsistent."""

    exit_code = 3


class DataIOError(DpmError, OSError):
    exit_code = 3


class WorkerError(DpmError, RuntimeError):
    """A map task failed; wraps the original exception."""

    exit_code = 3
