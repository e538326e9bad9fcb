"""Exception hierarchy shared across the package.

Each CLI-facing error class maps to a distinct process exit code
(see cli.EXIT_CODES).
"""


class PoolAdError(Exception):
    """Base class for all package errors."""


class ParseError(PoolAdError):
    """Malformed input file (CSV, config, spec string)."""


class DataError(PoolAdError):
    """Input data violates a precondition (too short, degenerate labels, ...)."""


class IntegrityError(PoolAdError):
    """Pool directory or model file is missing/corrupt."""


class DivergenceError(PoolAdError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, message: str | None = None):
        self.epoch = epoch
        super().__init__(message or f"non-finite loss at epoch {epoch}")
