"""Exception types shared across the package; the CLI maps them to exit codes."""


class ConfigError(ValueError):
    """Invalid configuration (exit code 2)."""


class DataError(ValueError):
    """Malformed or misaligned data (exit code 3)."""


class NumericError(RuntimeError):
    """Non-finite values during training or a failed gradient check (exit code 4)."""
