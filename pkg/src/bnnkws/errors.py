"""Error types that map onto the CLI exit codes."""


class ConfigError(ValueError):
    """Invalid configuration or arguments (exit code 1)."""


class DataError(ValueError):
    """Missing or malformed input data (exit code 2)."""


class NumericError(ArithmeticError):
    """Non-finite learning state detected (exit code 3)."""
