"""Exception taxonomy, mapped by the CLI onto exit codes (1 config/usage, 2 numeric/runtime)."""


class SimulatorError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(SimulatorError):
    """Static setup is invalid: bad dimensions, impossible settings, malformed files."""


class UsageError(SimulatorError):
    """An operation was called with invalid dynamic arguments."""


class NumericError(SimulatorError):
    """Non-finite values or a violated numeric precondition."""


class ConfigParseError(ConfigurationError):
    """Config file rejected.  `code` separates missing-file / syntax / unknown-key / range."""

    def __init__(self, code: str, message: str):
        super().__init__(f"[{code}] {message}")
        self.code = code
