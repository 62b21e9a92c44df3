"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, NumericError -> 4. Everything else is a plain bug.
"""


class SvpError(Exception):
    """Base class for all package errors."""


class ConfigError(SvpError):
    """Invalid, unknown, or inconsistent configuration."""


class DataError(SvpError):
    """Missing or malformed input data (clips, corpora, checkpoints)."""


class ContractError(SvpError):
    """A documented precondition of an operation was violated."""


class NumericError(SvpError):
    """Non-finite values or numerical divergence during compute."""
