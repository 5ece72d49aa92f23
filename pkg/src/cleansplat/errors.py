"""Error taxonomy shared across the package and mapped to CLI exit codes."""


class UsageError(ValueError):
    """Bad arguments or configuration (CLI exit code 2)."""


class DataError(RuntimeError):
    """Missing or malformed datasets, checkpoints, or images (exit code 3)."""


class NumericError(RuntimeError):
    """Non-finite losses or gradients during optimization (exit code 4)."""
