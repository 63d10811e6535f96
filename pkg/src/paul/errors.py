"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: configuration / parse problems exit
with 2, numerical aborts with 3.
"""


class PaulError(Exception):
    """Base class for all package errors."""


class ConfigError(PaulError):
    """Invalid configuration file, flag, or option combination."""


class NumericalAbort(PaulError):
    """Training produced a non-finite loss; carries a diagnostic dump."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
